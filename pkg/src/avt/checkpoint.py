"""Checkpoint serialization.

Wire format: magic "AVTCKPT1", a format version byte, a precision flag byte
(0 = float64, 1 = float32), then two count-prefixed sections of named
tensors (model tensors, then optimizer buffers) and a trailing 32-bit
checksum (CRC32, little-endian) of all preceding bytes.  Each tensor
record is: u64 name length + UTF-8 name, u64 rank, u64 extents
(little-endian), then the values as little-endian IEEE-754 in the flagged
precision.

Non-tensor state (epoch counter, RNG state, config fingerprint) rides in
the tensor section under reserved "__meta__/" names, encoded as exact
small integers (16-bit limbs / byte values) so round trips are lossless in
either precision.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"AVTCKPT1"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_FLAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}

_META_EPOCH = "__meta__/epoch"
_META_RNG = "__meta__/rng"
_META_FINGERPRINT = "__meta__/fingerprint"


class CheckpointError(IOError):
    """Checkpoint file is missing, truncated, corrupt, or incompatible."""


@dataclass
class ModelState:
    """Everything needed to resume training bit-exactly."""

    tensors: dict[str, np.ndarray]
    opt_buffers: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict | None = None
    config_fingerprint: bytes = b""
    dtype: np.dtype = np.dtype(np.float64)


def _int_to_limbs(value: int, n_limbs: int) -> np.ndarray:
    limbs = [(value >> (16 * i)) & 0xFFFF for i in range(n_limbs)]
    return np.array(limbs, dtype=np.float64)


def _limbs_to_int(limbs: np.ndarray) -> int:
    return sum(int(round(float(v))) << (16 * i) for i, v in enumerate(limbs))


def _encode_meta(state: ModelState) -> dict[str, np.ndarray]:
    out = {_META_EPOCH: np.array([float(state.epoch)])}
    if state.rng_state is not None:
        rs = state.rng_state
        if rs.get("bit_generator") != "PCG64":
            raise CheckpointError(f"unsupported bit generator {rs.get('bit_generator')!r}")
        out[f"{_META_RNG}/state"] = _int_to_limbs(rs["state"]["state"], 8)
        out[f"{_META_RNG}/inc"] = _int_to_limbs(rs["state"]["inc"], 8)
        out[f"{_META_RNG}/has_uint32"] = np.array([float(rs["has_uint32"])])
        out[f"{_META_RNG}/uinteger"] = _int_to_limbs(rs["uinteger"], 2)
    if state.config_fingerprint:
        out[_META_FINGERPRINT] = np.frombuffer(state.config_fingerprint,
                                               dtype=np.uint8).astype(np.float64)
    return out


def _decode_meta(meta: dict[str, np.ndarray], state: ModelState) -> None:
    if _META_EPOCH in meta:
        state.epoch = int(round(float(meta[_META_EPOCH][0])))
    if f"{_META_RNG}/state" in meta:
        state.rng_state = {
            "bit_generator": "PCG64",
            "state": {"state": _limbs_to_int(meta[f"{_META_RNG}/state"]),
                      "inc": _limbs_to_int(meta[f"{_META_RNG}/inc"])},
            "has_uint32": int(round(float(meta[f"{_META_RNG}/has_uint32"][0]))),
            "uinteger": _limbs_to_int(meta[f"{_META_RNG}/uinteger"]),
        }
    if _META_FINGERPRINT in meta:
        state.config_fingerprint = bytes(
            np.round(meta[_META_FINGERPRINT]).astype(np.uint8).tobytes())


def _write_section(chunks: list[bytes], tensors: dict[str, np.ndarray], dtype: np.dtype) -> None:
    chunks.append(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype=dtype)
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset "
                                  f"{self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _read_section(r: _Reader, dtype: np.dtype) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    count = r.u64()
    for _ in range(count):
        name = r.take(r.u64()).decode("utf-8")
        rank = r.u64()
        shape = tuple(r.u64() for _ in range(rank))
        n_values = int(np.prod(shape)) if rank else 1
        raw = r.take(n_values * dtype.itemsize)
        out[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return out


def save_checkpoint(state: ModelState, path) -> None:
    dtype = np.dtype(state.dtype)
    if dtype not in _FLAGS:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype}")
    chunks: list[bytes] = [MAGIC, bytes([VERSION]), bytes([_FLAGS[dtype]])]
    # Meta rides in float64 regardless of the flag?  No: one flag governs the
    # whole file, so meta values are restricted to 16-bit-exact integers that
    # survive float32 as well.
    tensors = dict(state.tensors)
    tensors.update(_encode_meta(state))
    _write_section(chunks, tensors, dtype)
    _write_section(chunks, state.opt_buffers, dtype)
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path) -> ModelState:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 2 + 4:
        raise CheckpointError(f"checkpoint {path} is too short ({len(blob)} bytes)")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"checkpoint {path} has wrong magic")
    body, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointError(f"checkpoint {path} fails its checksum")
    r = _Reader(body)
    r.take(len(MAGIC))
    version = r.take(1)[0]
    if version != VERSION:
        raise CheckpointError(f"checkpoint {path} has unsupported version {version}")
    flag = r.take(1)[0]
    if flag not in _DTYPES:
        raise CheckpointError(f"checkpoint {path} has unknown precision flag {flag}")
    dtype = _DTYPES[flag]
    tensors = _read_section(r, dtype)
    opt_buffers = _read_section(r, dtype)
    if r.pos != len(body):
        raise CheckpointError(f"checkpoint {path} has {len(body) - r.pos} trailing bytes")

    state = ModelState(tensors={}, opt_buffers=opt_buffers,
                       dtype=np.dtype(np.float64) if flag == 0 else np.dtype(np.float32))
    meta = {k: v.astype(np.float64) for k, v in tensors.items() if k.startswith("__meta__/")}
    state.tensors = {k: v for k, v in tensors.items() if not k.startswith("__meta__/")}
    _decode_meta(meta, state)
    return state
