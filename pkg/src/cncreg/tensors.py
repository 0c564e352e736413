"""Dense array storage, synthetic phantoms and image-quality metrics.

Tensors are plain ``numpy`` arrays.  On disk they use the ``CNCT`` layout::

    b"CNCT" | version u8 (=1) | dtype u8 (=1, float32) | ndim u8 |
    ndim x u32 little-endian dims | row-major little-endian float32 payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"CNCT"
VERSION = 1
DTYPE_FLOAT32 = 1

SSIM_SIGMA = 1.5
SSIM_WIN = 11


class TensorFormatError(ValueError):
    """Raised when a CNCT file cannot be decoded."""


def as_tensor(data, shape=None) -> np.ndarray:
    """Return ``data`` as a finite float32 array, optionally reshaped."""
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    if arr.ndim == 0 or any(d < 1 for d in arr.shape):
        raise ValueError(f"tensor shape must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


def write_tensor(t, path) -> None:
    arr = as_tensor(t)
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    header = MAGIC + bytes([VERSION, DTYPE_FLOAT32, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, dtype, ndim = raw[4], raw[5], raw[6]
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError("unsupported dtype")
    if ndim == 0:
        raise TensorFormatError("zero-dimensional tensor")
    head_end = 7 + 4 * ndim
    if len(raw) < head_end:
        raise TensorFormatError("truncated header")
    dims = struct.unpack(f"<{ndim}I", raw[7:head_end])
    if any(d == 0 for d in dims):
        raise TensorFormatError("zero-length dimension")
    count = 1
    for d in dims:
        count *= d
    if 4 * count > 2**63 - 1:
        raise TensorFormatError("dims overflow")
    if len(raw) - head_end != 4 * count:
        raise TensorFormatError("truncated")
    data = np.frombuffer(raw, dtype="<f4", offset=head_end).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise TensorFormatError("non-finite payload")
    return data.reshape(dims)


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalized coordinates, the image spanning [-1, 1]^2."""

    cx: float
    cy: float
    a: float
    b: float
    angle: float
    intensity: float


@dataclass(frozen=True)
class PhantomSpec:
    size: int
    n_ellipses: int
    seed: int
    intensity_range: tuple[float, float] = (0.1, 0.6)

    def validate(self) -> None:
        if self.size < 8:
            raise ValueError(f"phantom size must be >= 8, got {self.size}")
        if self.n_ellipses < 1:
            raise ValueError("n_ellipses must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        lo, hi = self.intensity_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("intensity_range must satisfy 0 < lo <= hi <= 1")


def pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized pixel-center coordinates; row 0 is the top (y = +1)."""
    c = (np.arange(size) - (size - 1) / 2) / (size / 2)
    xx, yy = np.meshgrid(c, -c)
    return xx, yy


def render_ellipses(size: int, ellipses) -> np.ndarray:
    xx, yy = pixel_grid(size)
    img = np.zeros((size, size))
    for e in ellipses:
        c, s = np.cos(e.angle), np.sin(e.angle)
        u = (xx - e.cx) * c + (yy - e.cy) * s
        v = -(xx - e.cx) * s + (yy - e.cy) * c
        img[(u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0] += e.intensity
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def sample_ellipses(spec: PhantomSpec) -> list[Ellipse]:
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.intensity_range
    out = []
    for _ in range(spec.n_ellipses):
        r = 0.5 * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        a, b = rng.uniform(0.08, 0.45, size=2)
        out.append(
            Ellipse(
                cx=r * np.cos(phi),
                cy=r * np.sin(phi),
                a=float(a),
                b=float(b),
                angle=float(rng.uniform(0, np.pi)),
                intensity=float(rng.uniform(lo, hi)),
            )
        )
    return out


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Random-ellipse phantom, deterministic in ``spec``, values in [0, 1]."""
    spec.validate()
    return render_ellipses(spec.size, sample_ellipses(spec))


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(data_range**2 / mse))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over an 11x11 Gaussian window (sigma 1.5).

    Local statistics are population (not sample) moments; borders within
    half a window of the edge are excluded from the mean.
    """
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN} pixels per side")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    truncate = ((SSIM_WIN - 1) // 2) / SSIM_SIGMA

    def blur(img):
        return ndimage.gaussian_filter(img, SSIM_SIGMA, mode="reflect", truncate=truncate)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    pad = (SSIM_WIN - 1) // 2
    return float(np.mean((num / den)[pad:-pad, pad:-pad]))
