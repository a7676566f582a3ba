"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps a float32/float64 ndarray and records how it was
produced; ``backward()`` on a scalar walks the recorded graph once in
reverse topological order and accumulates d(loss)/d(leaf) into the ``grad``
buffers of leaves that require gradients.

Only the operators the networks in this project need are provided.
Broadcasting is restricted to Python scalars; tensor-tensor operations
demand exact shape agreement, so shape bugs surface as errors rather than
silent broadcasts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float64
LOG_2PI = math.log(2.0 * math.pi)

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# When True, relu's adjoint is deliberately corrupted.  Used as a negative
# control: gradient checks must catch the fault (see verify module).
_ADJOINT_FAULT = False

# When False, operations do not record the graph (forward values only).
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes violate an operator's contract."""


class DomainError(ValueError):
    """Operand values lie outside an operator's domain (e.g. log of <= 0)."""


def set_adjoint_fault(enabled: bool) -> None:
    """Enable/disable the deliberate relu-adjoint fault (negative control)."""
    global _ADJOINT_FAULT
    _ADJOINT_FAULT = bool(enabled)


class no_grad:
    """Context manager that disables graph recording (forward values only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """Dense array node in a reverse-mode differentiation graph.

    Values are treated as immutable after creation; the optimizer mutates
    leaf parameter ``data`` in place, which is the one sanctioned exception.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None  # callable grad_out -> tuple of parent grads
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph plumbing -------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be a scalar.  Repeated calls without ``zero_grad``
        accumulate, matching the gradient-sum-over-consumers rule.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor that does not require gradients")

        topo = self._topo_order()
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def _topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return _add(_mul(self, -1.0), other)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _mul(self, -1.0)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(g):
            return (g * out_data,)

        return _from_op(out_data, (self,), backward)

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise DomainError(f"log requires positive values, min value {self.data.min()!r}")
        x = self.data

        def backward(g):
            return (g / x,)

        return _from_op(np.log(x), (self,), backward)

    def relu(self) -> "Tensor":
        mask = self.data > 0.0

        def backward(g):
            pg = g * mask
            if _ADJOINT_FAULT:
                pg = pg * 1.05  # deliberate corruption, see set_adjoint_fault
            return (pg,)

        return _from_op(np.where(mask, self.data, 0.0), (self,), backward)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        mask = (self.data > lo) & (self.data < hi)

        def backward(g):
            return (g * mask,)

        return _from_op(np.clip(self.data, lo, hi), (self,), backward)

    def sum(self) -> "Tensor":
        shape = self.shape

        def backward(g):
            return (np.broadcast_to(g, shape).copy(),)

        return _from_op(self.data.sum(keepdims=False), (self,), backward)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def backward(g):
            return (g.reshape(old),)

        return _from_op(self.data.reshape(shape), (self,), backward)

    def narrow(self, start: int, stop: int) -> "Tensor":
        """Column slice [:, start:stop] of a 2-d tensor."""
        if self.ndim != 2:
            raise ShapeError(f"narrow expects a 2-d tensor, got shape {self.shape}")
        full = self.shape

        def backward(g):
            pg = np.zeros(full, dtype=g.dtype)
            pg[:, start:stop] = g
            return (pg,)

        return _from_op(self.data[:, start:stop].copy(), (self,), backward)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not match "
                         "(only scalar broadcasting is supported)")


def _add(a: Tensor, other):
    if isinstance(other, Tensor):
        _check_same_shape("add", a, other)

        def backward(g):
            return g, g

        return _from_op(a.data + other.data, (a, other), backward)
    c = float(other)

    def backward(g):
        return (g,)

    return _from_op(a.data + c, (a,), backward)


def _mul(a: Tensor, other):
    if isinstance(other, Tensor):
        _check_same_shape("mul", a, other)
        ad, bd = a.data, other.data

        def backward(g):
            return g * bd, g * ad

        return _from_op(ad * bd, (a, other), backward)
    c = float(other)

    def backward(g):
        return (g * c,)

    return _from_op(a.data * c, (a,), backward)


# -- neural-network operators -----------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x (N,D), weight (D,M), bias (M,)."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"dense: expected 2-d x, 2-d weight, 1-d bias, got "
                         f"{x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"dense: inner extents disagree for x {x.shape}, "
                         f"weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _from_op(xd @ wd + bias.data, (x, weight, bias), backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (N,C,H,W) with kernel (O,C,KH,KW) plus bias (O,).

    Zero padding; no kernel flip.  Output extents (H + 2p - K)/stride + 1
    must be positive integers.
    """
    if x.ndim != 4 or kernel.ndim != 4 or bias.ndim != 1:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, 1-d bias, got "
                         f"{x.shape}, {kernel.shape}, {bias.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(f"conv2d: input channels {c} != kernel input channels {ck} "
                         f"(input {x.shape}, kernel {kernel.shape})")
    if bias.shape[0] != o:
        raise ShapeError(f"conv2d: bias extent {bias.shape[0]} != output channels {o}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    for extent, k in ((h, kh), (w, kw)):
        if (extent + 2 * padding - k) % stride != 0 or (extent + 2 * padding - k) // stride + 1 < 1:
            raise ShapeError(f"conv2d: output extent for input {x.shape}, kernel {kernel.shape}, "
                             f"stride {stride}, padding {padding} is not a positive integer")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, kernel, bias)

    xp = x.data if padding == 0 else np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)  # (N, C*KH*KW, OH*OW)
    kflat = kernel.data.reshape(o, -1)
    out = np.tensordot(kflat, cols, axes=([1], [1]))  # (O, N, OH*OW)
    out = out.transpose(1, 0, 2).reshape(n, o, oh, ow) + bias.data[None, :, None, None]

    def backward(g):
        gflat = g.reshape(n, o, oh * ow)
        db = g.sum(axis=(0, 2, 3))
        cols_b = _im2col(xp, kh, kw, stride, oh, ow)
        dk = np.tensordot(gflat, cols_b, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        dcols = np.tensordot(kflat, gflat, axes=([0], [1]))  # (C*KH*KW, N, OH*OW)
        dcols = dcols.reshape(c, kh, kw, n, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp if padding == 0 else dxp[:, :, padding:padding + h, padding:padding + w]
        return dx, dk, db

    return _from_op(out, (x, kernel, bias), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _conv1x1(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    n, c, h, w = x.shape
    o = kernel.shape[0]
    kmat = kernel.data.reshape(o, c)
    xd = x.data
    out = np.tensordot(kmat, xd, axes=([1], [1])).transpose(1, 0, 2, 3) \
        + bias.data[None, :, None, None]

    def backward(g):
        db = g.sum(axis=(0, 2, 3))
        dk = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3])).reshape(kernel.shape)
        dx = np.tensordot(kmat.T, g, axes=([1], [1])).transpose(1, 0, 2, 3)
        return dx, dk, db

    return _from_op(out, (x, kernel, bias), backward)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool,
                 eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel standardization of x (N,C,H,W) with affine (gamma, beta).

    Train mode normalizes with batch statistics (biased variance) and updates
    the running buffers in place with an exponential moving average; eval
    mode normalizes with the running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects a 4-d input, got shape {x.shape}")
    return _batch_norm(x, gamma, beta, running_mean, running_var, training, eps, momentum)


def batch_norm1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool,
                 eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """batch_norm2d semantics for feature vectors x (N,C)."""
    if x.ndim != 2:
        raise ShapeError(f"batch_norm1d expects a 2-d input, got shape {x.shape}")
    return _batch_norm(x, gamma, beta, running_mean, running_var, training, eps, momentum)


def _batch_norm(x, gamma, beta, running_mean, running_var, training, eps, momentum):
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
                         f"do not match channel extent {c} of input {x.shape}")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    m = x.size // c
    expand = (lambda v: v[None, :, None, None]) if x.ndim == 4 else (lambda v: v[None, :])

    if training:
        if m < 2:
            raise ShapeError(f"batch_norm train mode needs >= 2 elements per channel, "
                             f"got {m} for input shape {x.shape}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - expand(mu)) * expand(inv_std)
    out = expand(gamma.data) * xhat + expand(beta.data)

    if training:
        xd = x.data

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * expand(gamma.data)
            centered = xd - expand(mu)
            dvar = (dxhat * centered).sum(axis=axes) * (-0.5) * inv_std ** 3
            dmu = -(dxhat.sum(axis=axes)) * inv_std + dvar * (-2.0 / m) * centered.sum(axis=axes)
            dx = dxhat * expand(inv_std) + expand(dvar) * (2.0 / m) * centered + expand(dmu) / m
            return dx, dgamma, dbeta

    else:

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dx = g * expand(gamma.data * inv_std)
            return dx, dgamma, dbeta

    return _from_op(out, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of x (N,C,H,W) -> (N,C); adjoint spreads gradient uniformly."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _from_op(x.data.mean(axis=(2, 3)), (x,), backward)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate (N,D1) and (N,D2) along the feature axis."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"concat expects 2-d tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat: leading extents differ, {a.shape} vs {b.shape}")
    d1 = a.shape[1]

    def backward(g):
        return g[:, :d1].copy(), g[:, d1:].copy()

    return _from_op(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of logits (N,C) against integer labels (N,)."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects 2-d logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} "
                         f"does not match logits {logits.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sumez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sumez)
    loss = -logp[np.arange(n), labels].mean()
    probs = ez / sumez

    def backward(g):
        dz = probs.copy()
        dz[np.arange(n), labels] -= 1.0
        return (dz * (g / n),)

    return _from_op(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients with central differences."""

    tol: float
    max_rel_err: float = 0.0
    per_input: list = field(default_factory=list)  # (label, n_checked, max_rel_err)
    nonfinite: bool = False

    @property
    def ok(self) -> bool:
        return not self.nonfinite and self.max_rel_err < self.tol


def grad_check(fn, inputs: list[Tensor], h: float = 1e-5, tol: float = 1e-4,
               max_entries_per_input: int | None = None, rng: np.random.Generator | None = None,
               rel_floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` must return a scalar Tensor computed from ``inputs`` and must be
    deterministic (re-seed any internal randomness per call).  Relative error
    is |ad - fd| / max(|ad|, |fd|, rel_floor) per coordinate; non-finite
    values are reported, never silently passed.  Use 64-bit inputs: the
    finite-difference tolerance is unreachable in 32-bit.
    """
    report = GradCheckReport(tol=tol)
    for t in inputs:
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require gradients")
        if not t.data.flags["C_CONTIGUOUS"]:
            t.data = np.ascontiguousarray(t.data)
        t.zero_grad()

    out = fn()
    if out.data.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        report.nonfinite = True
        return report
    out.backward()

    analytic = []
    for t in inputs:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())
        t.zero_grad()

    rng = rng or np.random.default_rng(0)
    for idx, (t, ad) in enumerate(zip(inputs, analytic)):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries_per_input is not None and n > max_entries_per_input:
            coords = rng.choice(n, size=max_entries_per_input, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            fp = float(fn().data.reshape(-1)[0])
            flat[k] = orig - h
            fm = float(fn().data.reshape(-1)[0])
            flat[k] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                report.nonfinite = True
                continue
            fd = (fp - fm) / (2.0 * h)
            a = float(ad.reshape(-1)[k])
            rel = abs(a - fd) / max(abs(a), abs(fd), rel_floor)
            worst = max(worst, rel)
        label = t.name or f"input{idx}"
        report.per_input.append((label, len(coords), worst))
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
