"""Bounded linear forward operators and the FBP pseudo-inverse.

Every operator here is backed by an explicit matrix (dense for small
instances, sparse for the Radon transform), so the adjoint is the exact
transpose of the discretized forward map.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse


class ZeroOperatorWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class RadonGeometry:
    """Parallel-beam geometry in pixel units.

    Detector bin ``d`` sits at offset ``(d - (n_detectors - 1) / 2) * detector_spacing``
    from the rotation center; ``angles`` are radians in [0, pi).
    """

    image_size: int
    angles: tuple[float, ...]
    n_detectors: int
    detector_spacing: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if self.image_size < 4:
            raise ValueError(f"image_size must be >= 4, got {self.image_size}")
        if self.n_detectors < 1:
            raise ValueError("n_detectors must be >= 1")
        if len(self.angles) == 0:
            raise ValueError("geometry needs at least one angle")
        a = np.asarray(self.angles)
        if np.any(np.diff(a) <= 0) or a[0] < 0 or a[-1] >= np.pi:
            raise ValueError("angles must be strictly increasing within [0, pi)")
        if self.detector_spacing <= 0:
            raise ValueError("detector_spacing must be positive")

    @property
    def n_angles(self) -> int:
        return len(self.angles)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_detectors)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    @property
    def angular_coverage(self) -> float:
        """Total angle covered, counting one uniform cell per projection."""
        if self.n_angles == 1:
            return np.pi
        a = np.asarray(self.angles)
        return float((a[-1] - a[0]) * self.n_angles / (self.n_angles - 1))


def default_detectors(image_size: int) -> int:
    # 700 rays for a 512 grid
    return int(round(image_size * 700 / 512))


def sparse_geometry(image_size: int, n_angles: int = 30, n_detectors: int | None = None) -> RadonGeometry:
    angles = np.arange(n_angles) * np.pi / n_angles
    return RadonGeometry(image_size, tuple(angles), n_detectors or default_detectors(image_size))


def limited_geometry(
    image_size: int, n_angles: int = 30, arc_degrees: float = 120.0, n_detectors: int | None = None
) -> RadonGeometry:
    """Angles uniform over ``[0, arc_degrees)``; the remaining wedge is unobserved."""
    if not 0 < arc_degrees <= 180:
        raise ValueError("arc_degrees must lie in (0, 180]")
    angles = np.arange(n_angles) * np.deg2rad(arc_degrees) / n_angles
    return RadonGeometry(image_size, tuple(angles), n_detectors or default_detectors(image_size))


@dataclass(frozen=True, eq=False)
class LinearOperator:
    """``A = scale * M`` acting on arrays of ``domain_shape``."""

    matrix: object
    domain_shape: tuple[int, ...]
    range_shape: tuple[int, ...]
    scale: float = 1.0
    kind: str = "matrix"
    geometry: RadonGeometry | None = field(default=None)

    @property
    def domain_size(self) -> int:
        return math.prod(self.domain_shape)

    @property
    def range_size(self) -> int:
        return math.prod(self.range_shape)

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        batch = _batch_shape(x.shape, self.domain_shape)
        flat = x.reshape(-1, self.domain_size)
        out = np.asarray((self.matrix @ flat.T).T) * self.scale
        return out.reshape(batch + self.range_shape)

    def adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        batch = _batch_shape(y.shape, self.range_shape)
        flat = y.reshape(-1, self.range_size)
        out = np.asarray((self.matrix.T @ flat.T).T) * self.scale
        return out.reshape(batch + self.domain_shape)

    def with_scale(self, scale: float) -> "LinearOperator":
        return replace(self, scale=float(scale))

    def dense(self) -> np.ndarray:
        m = self.matrix.toarray() if sparse.issparse(self.matrix) else np.asarray(self.matrix)
        return m * self.scale


def _batch_shape(shape, core):
    core = tuple(core)
    if tuple(shape[len(shape) - len(core):]) != core:
        raise ValueError(f"shape mismatch: expected trailing {core}, got {tuple(shape)}")
    return tuple(shape[: len(shape) - len(core)])


def build_matrix_operator(m) -> LinearOperator:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.size == 0:
        raise ValueError("matrix operator needs a non-empty 2-D matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return LinearOperator(m, (m.shape[1],), (m.shape[0],), kind="matrix")


@functools.lru_cache(maxsize=16)
def _radon_matrix(geom: RadonGeometry) -> sparse.csr_matrix:
    n = geom.image_size
    half = (n - 1) / 2
    t_max = math.ceil(n / math.sqrt(2)) + 1
    t = np.arange(-t_max, t_max + 1, dtype=np.float64)
    s = (np.arange(geom.n_detectors) - (geom.n_detectors - 1) / 2) * geom.detector_spacing
    rows, cols, vals = [], [], []
    for k, theta in enumerate(geom.angles):
        c, si = math.cos(theta), math.sin(theta)
        px = s[:, None] * c - t[None, :] * si
        py = s[:, None] * si + t[None, :] * c
        col = px + half
        row = half - py
        c0 = np.floor(col)
        r0 = np.floor(row)
        fc = col - c0
        fr = row - r0
        bins = (k * geom.n_detectors + np.arange(geom.n_detectors))[:, None] * np.ones_like(t)[None, :]
        for dr, dc, w in (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc),
        ):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n) & (w > 0)
            rows.append(bins[ok].astype(np.int64))
            cols.append((rr[ok] * n + cc[ok]).astype(np.int64))
            vals.append(w[ok])
    m = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_angles * geom.n_detectors, n * n),
    )
    return m.tocsr()


def build_radon(geom: RadonGeometry) -> LinearOperator:
    """Ray-driven Radon transform.

    Each bin integrates the bilinearly interpolated image at unit-spaced
    points along its ray; pixels outside the grid count as zero.
    """
    return LinearOperator(
        _radon_matrix(geom), geom.image_shape, geom.sinogram_shape, kind="radon", geometry=geom
    )


def estimate_operator_norm(op: LinearOperator, iters: int = 500, tol: float = 1e-9, seed=0) -> float:
    """Power iteration on ``A^T A``; returns the square root of the top eigenvalue estimate."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.domain_shape)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        z = op.adjoint(op.apply(x))
        new = float(np.vdot(x, z))
        nz = np.linalg.norm(z)
        if nz == 0.0:
            warnings.warn("operator is zero on the power-iteration subspace", ZeroOperatorWarning)
            return 0.0
        x = z / nz
        if est > 0 and abs(new - est) <= tol * est:
            est = new
            break
        est = new
    return math.sqrt(max(est, 0.0))


def normalize_operator(op: LinearOperator, **kwargs) -> LinearOperator:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroOperatorWarning)
        norm = estimate_operator_norm(op, **kwargs)
    if norm == 0.0:
        raise ValueError("cannot normalize a zero operator")
    return op.with_scale(op.scale / norm)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def simulate_measurement(op: LinearOperator, x, noise: NoiseModel) -> tuple[np.ndarray, float]:
    """Return ``(A x + sigma g, ||sigma g||)`` with ``g`` standard normal from ``noise.seed``."""
    clean = op.apply(x)
    if clean.shape != op.range_shape:
        raise ValueError("simulate_measurement expects a single (unbatched) input")
    g = np.random.default_rng(noise.seed).standard_normal(op.range_shape)
    e = noise.sigma * g
    return clean + e, float(np.linalg.norm(e))


def ramp_filter(sino, spacing: float = 1.0) -> np.ndarray:
    """Ram-Lak filtering along the detector axis, zero-padded to a power of two."""
    sino = np.asarray(sino, dtype=np.float64)
    n_det = sino.shape[-1]
    size = max(64, 1 << math.ceil(math.log2(2 * n_det)))
    ramp = 2.0 * np.abs(np.fft.fftfreq(size, d=spacing))
    spec = np.fft.fft(sino, n=size, axis=-1) * ramp
    return np.real(np.fft.ifft(spec, axis=-1))[..., :n_det]


def fbp(y, geom: RadonGeometry) -> np.ndarray:
    """Filtered back-projection through the matched Radon adjoint.

    The quadrature weight is half the angular cell, i.e. ``pi / (2 n_angles)``
    for a full half-turn of uniformly spaced angles.
    """
    y = np.asarray(y, dtype=np.float64)
    if geom.n_angles == 0:
        raise ValueError("fbp needs at least one angle")
    if y.shape[-2:] != geom.sinogram_shape:
        raise ValueError(f"sinogram shape {y.shape} does not match geometry {geom.sinogram_shape}")
    q = ramp_filter(y, geom.detector_spacing) * geom.detector_spacing
    weight = geom.angular_coverage / (2 * geom.n_angles)
    return build_radon(geom).adjoint(q) * weight
