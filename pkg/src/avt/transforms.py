"""Sampling, composing and applying projective image transformations.

Coordinates are normalized so pixel centers sit at ((2j+1)/W - 1,
(2i+1)/H - 1); the image occupies [-1, 1]^2 and the canonical corners are
(-1,-1), (1,-1), (1,1), (-1,1).  A sampled transformation is scale, then a
discrete rotation about the center, then an independent random displacement
of the four corners realized as the homography mapping the canonical
corners onto the displaced ones.

The regression target for a transformation is the 8-vector of corner
displacements under the full composed homography, standardized by constants
calibrated once from sampler draws (fixed seed) and frozen below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CANONICAL_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
TARGET_DIM = 8

# Fixed seed and draw count for target-standardization calibration runs.
CALIBRATION_SEED = 424242
CALIBRATION_DRAWS = 100_000

COLLINEARITY_TOL = 1e-9
MAX_RESAMPLE_ATTEMPTS = 100


class DegenerateCornersError(ValueError):
    """Four-point correspondence is (near-)collinear and has no homography."""


class PointAtInfinityError(ValueError):
    """Homogeneous scale vanished while mapping a point."""


@dataclass(frozen=True)
class TransformPrior:
    """Distribution p(t) over transformations: ranges and family."""

    jitter_max: float = 0.125
    scale_min: float = 0.8
    scale_max: float = 1.2
    rotations: tuple[float, ...] = (0.0, 90.0, 180.0, 270.0)
    family: str = "projective"  # projective | affine | identity

    def __post_init__(self):
        if self.jitter_max < 0:
            raise ValueError(f"jitter_max must be >= 0, got {self.jitter_max}")
        if not (0 < self.scale_min <= self.scale_max):
            raise ValueError(f"degenerate scale range [{self.scale_min}, {self.scale_max}]")
        if len(self.rotations) == 0:
            raise ValueError("rotation set must be non-empty")
        if self.family not in ("projective", "affine", "identity"):
            raise ValueError(f"unknown transformation family {self.family!r}")


IDENTITY_PRIOR = TransformPrior(jitter_max=0.0, scale_min=1.0, scale_max=1.0,
                                rotations=(0.0,), family="identity")


@dataclass
class TransformParams:
    """Generator parameters of one sampled transformation.

    For the affine family the first two jitter pairs are reinterpreted as
    (tx, ty) translation and (shear_x, shear_y) and the rest are zero.
    """

    scale: float
    rotation_deg: float
    corner_jitter: np.ndarray  # shape (8,), (dx, dy) per corner

    def is_identity(self) -> bool:
        return (self.scale == 1.0 and self.rotation_deg % 360.0 == 0.0
                and not np.any(self.corner_jitter))


class Homography:
    """Invertible 3x3 projective map, normalized so H[2,2] == 1 when nonzero."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography matrix must be 3x3, got shape {m.shape}")
        if abs(m[2, 2]) > 1e-12 and m[2, 2] != 1.0:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateCornersError("homography matrix is not invertible")
        self.matrix = m

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __repr__(self):
        return f"Homography({self.matrix.tolist()!r})"


IDENTITY_H = Homography(np.eye(3))


def sample_transform(rng: np.random.Generator, prior: TransformPrior) -> TransformParams:
    """Draw scale ~ U(range), rotation uniform over the set, jitter ~ U(+-max)."""
    if prior.family == "identity":
        return TransformParams(1.0, 0.0, np.zeros(TARGET_DIM))
    scale = float(rng.uniform(prior.scale_min, prior.scale_max))
    rotation = float(prior.rotations[rng.integers(len(prior.rotations))])
    jitter = rng.uniform(-prior.jitter_max, prior.jitter_max, size=TARGET_DIM)
    if prior.family == "affine":
        jitter[4:] = 0.0
    return TransformParams(scale, rotation, jitter)


def _rotation_matrix(deg: float) -> np.ndarray:
    # Multiples of 90 degrees get exact entries so their warps are exact
    # index permutations.
    d = deg % 360.0
    if d % 90.0 == 0.0:
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][int(d // 90.0) % 4]
    else:
        c, s = math.cos(math.radians(d)), math.sin(math.radians(d))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def params_to_homography(p: TransformParams, family: str = "projective") -> Homography:
    """Compose the staged maps: corner jitter after rotation after scale."""
    h_scale = np.diag([p.scale, p.scale, 1.0])
    h_rot = _rotation_matrix(p.rotation_deg)
    if family == "affine":
        tx, ty, shx, shy = p.corner_jitter[:4]
        h_shear = np.array([[1.0, shx, 0.0], [shy, 1.0, 0.0], [0.0, 0.0, 1.0]])
        h_trans = np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
        return Homography(h_trans @ h_rot @ h_scale @ h_shear)
    displaced = CANONICAL_CORNERS + p.corner_jitter.reshape(4, 2)
    h_jitter = dlt_solve(CANONICAL_CORNERS, displaced)
    return Homography(h_jitter.matrix @ h_rot @ h_scale)


def sample_homography(rng: np.random.Generator, prior: TransformPrior
                      ) -> tuple[TransformParams, Homography]:
    """Sample params and build the homography, resampling degenerate corners.

    Degeneracy is measure-zero for jitter <= 0.125 but the loop is bounded
    anyway (MAX_RESAMPLE_ATTEMPTS).
    """
    for _ in range(MAX_RESAMPLE_ATTEMPTS):
        params = sample_transform(rng, prior)
        try:
            return params, params_to_homography(params, prior.family)
        except DegenerateCornersError:
            continue
    raise DegenerateCornersError(
        f"no non-degenerate transformation after {MAX_RESAMPLE_ATTEMPTS} draws")


def _collinear(points: np.ndarray) -> bool:
    for i in range(4):
        for j in range(i + 1, 4):
            for k in range(j + 1, 4):
                a, b, c = points[i], points[j], points[k]
                area2 = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
                if area2 < COLLINEARITY_TOL:
                    return True
    return False


def dlt_solve(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Direct linear transform: the homography taking 4 src points to 4 dst points.

    Solves the 8x8 linear system (h33 fixed to 1) with partial pivoting.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    if _collinear(src):
        raise DegenerateCornersError(f"three source points are collinear: {src.tolist()}")
    if _collinear(dst):
        raise DegenerateCornersError(f"three destination points are collinear: {dst.tolist()}")
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCornersError(f"singular DLT system: {exc}") from exc
    return Homography(np.append(h, 1.0).reshape(3, 3))


def apply_homography_point(h: Homography, point) -> np.ndarray:
    """Map one (x, y) point; raises PointAtInfinityError when w vanishes."""
    x, y = float(point[0]), float(point[1])
    m = h.matrix
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) < 1e-12:
        raise PointAtInfinityError(f"point {point!r} maps to infinity (w={w!r})")
    return np.array([(m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
                     (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w])


def apply_homography_points(h: Homography, points: np.ndarray) -> np.ndarray:
    """Vectorized point map for an (N, 2) array (no infinity checks)."""
    m = h.matrix
    x, y = points[:, 0], points[:, 1]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    return np.stack([(m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
                     (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w], axis=1)


def compose(h2: Homography, h1: Homography) -> Homography:
    """Normalized product h2 . h1 (h1 applied first)."""
    return Homography(h2.matrix @ h1.matrix)


def corner_displacements(h: Homography) -> np.ndarray:
    """Displacements of the four canonical corners under h, flattened to (8,)."""
    mapped = apply_homography_points(h, CANONICAL_CORNERS)
    return (mapped - CANONICAL_CORNERS).reshape(-1)


# -- image warping -------------------------------------------------------------

# Fractional sample indices this close to an integer snap onto it, making
# identity and quarter-turn warps exact index permutations despite rounding.
_GRID_SNAP = 1e-9


def _pixel_centers(n: int) -> np.ndarray:
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def warp_image(img: np.ndarray, h: Homography) -> np.ndarray:
    """Inverse-mapping bilinear warp of img (C,H,W); outside [-1,1]^2 reads 0."""
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise ValueError(f"warp_image expects a (C,H,W) image, got shape {arr.shape}")
    c, height, width = arr.shape
    inv = h.inverse().matrix

    xs = _pixel_centers(width)
    ys = _pixel_centers(height)
    gx, gy = np.meshgrid(xs, ys)  # (H, W)
    w = inv[2, 0] * gx + inv[2, 1] * gy + inv[2, 2]
    bad = np.abs(w) < 1e-12
    w_safe = np.where(bad, 1.0, w)
    sx = (inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]) / w_safe
    sy = (inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]) / w_safe
    outside = bad | (np.abs(sx) > 1.0) | (np.abs(sy) > 1.0)

    # Continuous indices of the source sample in pixel units.
    fx = ((sx + 1.0) * width - 1.0) / 2.0
    fy = ((sy + 1.0) * height - 1.0) / 2.0
    for f in (fx, fy):
        rounded = np.rint(f)
        snap = np.abs(f - rounded) < _GRID_SNAP
        f[snap] = rounded[snap]

    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = fx - x0
    wy = fy - y0

    out = np.zeros_like(arr)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height) & ~outside
            weight = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
            xi_c = np.clip(xi, 0, width - 1)
            yi_c = np.clip(yi, 0, height - 1)
            contrib = arr[:, yi_c, xi_c] * (weight * valid)
            out += contrib.astype(arr.dtype, copy=False)
    return out


# -- target encoding -----------------------------------------------------------


@dataclass(frozen=True)
class TargetCodec:
    """Standardization of corner-displacement targets for one prior.

    encode: (displacements - mean) / std; decode reverses it and rebuilds
    the homography from the displaced corners by DLT.
    """

    mean: np.ndarray
    std: np.ndarray

    def encode(self, h: Homography) -> np.ndarray:
        return (corner_displacements(h) - self.mean) / self.std

    def decode(self, target: np.ndarray) -> Homography:
        target = np.asarray(target, dtype=np.float64).reshape(TARGET_DIM)
        displaced = CANONICAL_CORNERS + (target * self.std + self.mean).reshape(4, 2)
        return dlt_solve(CANONICAL_CORNERS, displaced)

    def gaussian_surrogate_entropy(self) -> float:
        """Differential entropy of the standardized targets under a unit
        Gaussian surrogate per dimension: D/2 * (log(2 pi) + 1)."""
        return 0.5 * TARGET_DIM * (math.log(2.0 * math.pi) + 1.0)


def calibrate_codec(prior: TransformPrior, n: int = CALIBRATION_DRAWS,
                    seed: int = CALIBRATION_SEED) -> TargetCodec:
    """Estimate per-dimension displacement mean/std from seeded sampler draws."""
    rng = np.random.default_rng(seed)
    disp = np.empty((n, TARGET_DIM))
    for i in range(n):
        _, h = sample_homography(rng, prior)
        disp[i] = corner_displacements(h)
    std = disp.std(axis=0)
    if np.any(std < 1e-12):
        raise ValueError("degenerate prior: target dimensions with zero spread "
                         "cannot be standardized")
    return TargetCodec(mean=disp.mean(axis=0), std=std)


# Frozen calibration for the default projective prior (CALIBRATION_DRAWS
# draws, CALIBRATION_SEED); regenerate with calibrate_codec(TransformPrior()).
DEFAULT_TARGET_MEAN = np.array([
    1.0015917062353656, 1.0018546981842553, -1.0016229246501676, 1.0018898451972724,
    -1.0023544555050057, -1.0016180172324642, 1.0020727100422142, -1.0020440042230365,
])
DEFAULT_TARGET_STD = np.array([
    1.0090547404239638, 1.0091453827278793, 1.0091778889150624, 1.0090770914433558,
    1.0091952456117135, 1.009060407950701, 1.0090293857442587, 1.0092216534790472,
])

_CODEC_CACHE: dict[TransformPrior, TargetCodec] = {}


def codec_for(prior: TransformPrior) -> TargetCodec:
    """Codec for a prior: frozen constants for the default projective prior,
    a fresh (cached) calibration otherwise.

    The identity family has zero target spread, so it shares the default
    projective codec; its targets are then the constant encoding of zero
    displacement.
    """
    if prior.family == "identity":
        prior = TransformPrior()
    if prior == TransformPrior():
        return TargetCodec(mean=DEFAULT_TARGET_MEAN.copy(), std=DEFAULT_TARGET_STD.copy())
    codec = _CODEC_CACHE.get(prior)
    if codec is None:
        codec = calibrate_codec(prior)
        _CODEC_CACHE[prior] = codec
    return codec
