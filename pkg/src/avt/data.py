"""Dataset ingestion, normalization, batching, and synthetic data.

Formats: CIFAR-10 binary batches (3073-byte records: 1 label byte +
3072 channel-major pixel bytes) and MNIST IDX (big-endian headers, magic
0x803 for images / 0x801 for labels; plain or gzipped files).  The
synthetic corpus renders 1-3 anti-aliased random convex polygons per
grayscale image, labeled by polygon count.

Images are float arrays in [0, 1] until normalized; normalization stats
always come from a train split and are carried on the Dataset record.
"""

from __future__ import annotations

import gzip
import os
import struct
import tarfile
import urllib.request
from dataclasses import dataclass, replace

import numpy as np

CIFAR_RECORD_BYTES = 3073
CIFAR_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(ValueError):
    """Dataset files are missing, malformed, or inconsistent."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float
    labels: np.ndarray | None
    split: str
    mean: np.ndarray | None = None  # per-channel stats used to normalize
    std: np.ndarray | None = None
    normalized: bool = False

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        labels = None if self.labels is None else self.labels[indices]
        return replace(self, images=self.images[indices], labels=labels)


# -- CIFAR-10 binary format ----------------------------------------------------


def _parse_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(path):
        raise DataError(f"missing CIFAR-10 batch file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise DataError(f"CIFAR-10 file {path} has {raw.size} bytes, "
                        f"not a multiple of {CIFAR_RECORD_BYTES}")
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(directory: str) -> tuple[Dataset, Dataset]:
    """Parse the standard binary batches: 50,000 train / 10,000 test images."""
    train_parts = [_parse_cifar_file(os.path.join(directory, f)) for f in CIFAR_FILES]
    train_images = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    test_images, test_labels = _parse_cifar_file(os.path.join(directory, CIFAR_TEST_FILE))
    return (Dataset(train_images, train_labels, "train"),
            Dataset(test_images, test_labels, "test"))


def download_cifar10(directory: str) -> None:
    """Fetch and unpack the binary CIFAR-10 archive into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    archive = os.path.join(directory, "cifar-10-binary.tar.gz")
    if not os.path.exists(archive):
        urllib.request.urlretrieve(CIFAR_URL, archive)
    with tarfile.open(archive, "r:gz") as tar:
        for member in tar.getmembers():
            base = os.path.basename(member.name)
            if base in CIFAR_FILES or base == CIFAR_TEST_FILE:
                member.name = base
                tar.extract(member, directory)


# -- MNIST IDX format ------------------------------------------------------------


def _read_idx_bytes(directory: str, name: str) -> bytes:
    for candidate in (os.path.join(directory, name), os.path.join(directory, name + ".gz")):
        if os.path.exists(candidate):
            if candidate.endswith(".gz"):
                with gzip.open(candidate, "rb") as f:
                    return f.read()
            with open(candidate, "rb") as f:
                return f.read()
    raise DataError(f"missing IDX file {name}[.gz] in {directory}")


def _parse_idx_images(blob: bytes, source: str) -> np.ndarray:
    if len(blob) < 16:
        raise DataError(f"IDX image file {source} is truncated (header)")
    magic, n, rows, cols = struct.unpack(">4i", blob[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise DataError(f"IDX image file {source} has magic {magic:#010x}, "
                        f"expected {MNIST_IMAGE_MAGIC:#010x}")
    expected = 16 + n * rows * cols
    if len(blob) != expected:
        raise DataError(f"IDX image file {source} has {len(blob)} bytes, expected {expected}")
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16)
    return pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def _parse_idx_labels(blob: bytes, source: str) -> np.ndarray:
    if len(blob) < 8:
        raise DataError(f"IDX label file {source} is truncated (header)")
    magic, n = struct.unpack(">2i", blob[:8])
    if magic != MNIST_LABEL_MAGIC:
        raise DataError(f"IDX label file {source} has magic {magic:#010x}, "
                        f"expected {MNIST_LABEL_MAGIC:#010x}")
    if len(blob) != 8 + n:
        raise DataError(f"IDX label file {source} has {len(blob)} bytes, expected {8 + n}")
    return np.frombuffer(blob, dtype=np.uint8, offset=8).astype(np.int64)


def load_mnist_idx(directory: str) -> tuple[Dataset, Dataset]:
    """Load IDX-format train and test splits from a directory."""
    out = []
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        images = _parse_idx_images(_read_idx_bytes(directory, img_name), img_name)
        labels = _parse_idx_labels(_read_idx_bytes(directory, lbl_name), lbl_name)
        if images.shape[0] != labels.shape[0]:
            raise DataError(f"{split} split has {images.shape[0]} images but "
                            f"{labels.shape[0]} labels")
        out.append(Dataset(images, labels, split))
    return out[0], out[1]


# -- synthetic shapes -------------------------------------------------------------

_SUPERSAMPLE = 4


def _convex_polygon(rng: np.random.Generator, size: int) -> np.ndarray:
    """Vertices of a random convex polygon: 3-6 points on a random ellipse."""
    k = int(rng.integers(3, 7))
    center = rng.uniform(0.25, 0.75, size=2) * size
    axes = rng.uniform(0.10, 0.35, size=2) * size
    tilt = rng.uniform(0.0, 2.0 * np.pi)
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=k))
    unit = np.stack([np.cos(angles) * axes[0], np.sin(angles) * axes[1]], axis=1)
    rot = np.array([[np.cos(tilt), -np.sin(tilt)], [np.sin(tilt), np.cos(tilt)]])
    return unit @ rot.T + center


def _fill_convex(canvas: np.ndarray, vertices: np.ndarray, value: float) -> None:
    """Paint a convex polygon (vertices in ccw order) onto a supersampled canvas."""
    ss = canvas.shape[0]
    ys, xs = np.mgrid[0:ss, 0:ss]
    px = (xs + 0.5) / _SUPERSAMPLE
    py = (ys + 0.5) / _SUPERSAMPLE
    inside = np.ones_like(canvas, dtype=bool)
    k = len(vertices)
    for i in range(k):
        ax, ay = vertices[i]
        bx, by = vertices[(i + 1) % k]
        inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
    np.maximum(canvas, inside * value, out=canvas)


def gen_synthetic_shapes(seed: int, n: int, size: int = 32) -> Dataset:
    """Grayscale images of 1-3 random convex polygons; label = count - 1."""
    if n < 1:
        raise ValueError(f"need n >= 1 images, got {n}")
    rng = np.random.default_rng(seed)
    images = np.empty((n, 1, size, size))
    labels = np.empty(n, dtype=np.int64)
    ss = size * _SUPERSAMPLE
    for i in range(n):
        count = int(rng.integers(1, 4))
        canvas = np.zeros((ss, ss))
        for _ in range(count):
            vertices = _convex_polygon(rng, size)
            intensity = float(rng.uniform(0.35, 1.0))
            _fill_convex(canvas, vertices, intensity)
        # Box-filter downsample realizes the anti-aliasing.
        images[i, 0] = canvas.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))
        labels[i] = count - 1
    return Dataset(images, labels, "train")


# -- normalization and batching ----------------------------------------------------


def normalize(ds: Dataset, stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Per-channel standardization; stats come from ``ds`` itself (a train
    split) unless provided."""
    if ds.normalized:
        raise ValueError(f"dataset split {ds.split!r} is already normalized")
    if stats is None:
        if ds.split != "train":
            raise ValueError("normalization stats must be computed from a train split; "
                             f"pass the train stats for split {ds.split!r}")
        mean = ds.images.mean(axis=(0, 2, 3))
        std = ds.images.std(axis=(0, 2, 3))
        std = np.where(std < 1e-12, 1.0, std)
    else:
        mean, std = stats
    images = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(ds, images=images, mean=mean.copy(), std=std.copy(), normalized=True)


def denormalize(ds: Dataset) -> Dataset:
    if not ds.normalized:
        raise ValueError("dataset is not normalized")
    images = ds.images * ds.std[None, :, None, None] + ds.mean[None, :, None, None]
    return replace(ds, images=images, mean=None, std=None, normalized=False)


def batch_iter(ds: Dataset, batch_size: int, seed: int):
    """Yield (images, labels) batches in a seeded shuffled order.

    One call covers one epoch; re-draw the order by deriving a fresh seed per
    epoch.  The final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(ds.n)
    for start in range(0, ds.n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], (None if ds.labels is None else ds.labels[idx])


def epoch_seed(base_seed: int, stream: int, epoch: int) -> int:
    """Stable derived seed for per-epoch randomness (shuffles, eval draws)."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(stream, epoch))
    return int(ss.generate_state(1, np.uint64)[0])
