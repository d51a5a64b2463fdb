"""Pixel grid, raster fields, bilinear sampling and discrete norms.

Rasters are stored as ``(K, H)`` arrays: row index ``k`` runs along y and the
column index ``h`` along x, so the x-index is the fastest in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    H: int
    K: int
    eps: float

    def __post_init__(self):
        if int(self.H) != self.H or int(self.K) != self.K:
            raise ValueError("H and K must be integers")
        if self.H < 1 or self.K < 1:
            raise ValueError(f"grid must have at least one pixel per axis, got {self.H}x{self.K}")
        if not (np.isfinite(self.eps) and self.eps > 0):
            raise ValueError(f"pixel pitch must be positive, got {self.eps}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.K, self.H)

    @property
    def extent(self) -> tuple[float, float]:
        return (self.eps * self.H, self.eps * self.K)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinate rasters ``(X, Y)``, each of shape ``(K, H)``."""
        xs = self.eps / 2 + np.arange(self.H) * self.eps
        ys = self.eps / 2 + np.arange(self.K) * self.eps
        return np.meshgrid(xs, ys)

    def index_of(self, point) -> tuple[int, int]:
        """Inverse of the pixel-center map; returns ``(h, k)``."""
        x, y = point
        return int(round((x - self.eps / 2) / self.eps)), int(round((y - self.eps / 2) / self.eps))


def _check_raster(spec: GridSpec, arr, name: str) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    if arr.shape != spec.shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {spec.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_raster(self.spec, self.values, "values"))

    @property
    def channels(self) -> np.ndarray:
        return self.values[None]


@dataclass(frozen=True, eq=False)
class VectorField2:
    spec: GridSpec
    u_x: np.ndarray
    u_y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u_x", _check_raster(self.spec, self.u_x, "u_x"))
        object.__setattr__(self, "u_y", _check_raster(self.spec, self.u_y, "u_y"))

    @classmethod
    def zeros(cls, spec: GridSpec) -> "VectorField2":
        return cls(spec, np.zeros(spec.shape), np.zeros(spec.shape))

    @classmethod
    def from_stack(cls, spec: GridSpec, arr: np.ndarray) -> "VectorField2":
        return cls(spec, arr[0], arr[1])

    @property
    def channels(self) -> np.ndarray:
        return np.stack([self.u_x, self.u_y])

    def speed(self) -> np.ndarray:
        return np.hypot(self.u_x, self.u_y)


def pixel_coords(spec: GridSpec) -> np.ndarray:
    """All pixel centers as an ``(H*K, 2)`` array, x-index fastest."""
    X, Y = spec.centers()
    return np.column_stack([X.ravel(), Y.ravel()])


def bilinear_weights(spec: GridSpec, pts: np.ndarray):
    """Corner indices and weights for bilinear lookup at ``pts`` (N, 2).

    Queries outside the lattice of pixel centers are clamped onto it.
    Returns ``(h0, h1, k0, k1, tx, ty, inside_x, inside_y)`` where the
    ``inside_*`` flags mark coordinates that were not clamped.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("query points must be finite")
    fx = pts[:, 0] / spec.eps - 0.5
    fy = pts[:, 1] / spec.eps - 0.5
    inside_x = (fx >= 0) & (fx <= spec.H - 1)
    inside_y = (fy >= 0) & (fy <= spec.K - 1)
    fx = np.clip(fx, 0, spec.H - 1)
    fy = np.clip(fy, 0, spec.K - 1)
    h0 = np.minimum(np.floor(fx).astype(np.intp), max(spec.H - 2, 0))
    k0 = np.minimum(np.floor(fy).astype(np.intp), max(spec.K - 2, 0))
    h1 = np.minimum(h0 + 1, spec.H - 1)
    k1 = np.minimum(k0 + 1, spec.K - 1)
    return h0, h1, k0, k1, fx - h0, fy - k0, inside_x, inside_y


def sample_raster(spec: GridSpec, arr: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinear samples of raster(s) ``arr`` (..., K, H) at ``pts`` (N, 2) -> (..., N)."""
    h0, h1, k0, k1, tx, ty, _, _ = bilinear_weights(spec, pts)
    a = arr[..., k0, h0] * (1 - tx) + arr[..., k0, h1] * tx
    b = arr[..., k1, h0] * (1 - tx) + arr[..., k1, h1] * tx
    return a * (1 - ty) + b * ty


def sample_bilinear(field: ScalarField | VectorField2, point):
    """Interpolated value of ``field`` at a single point or an ``(N, 2)`` batch."""
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    out = sample_raster(field.spec, field.channels, np.atleast_2d(pts))
    if isinstance(field, ScalarField):
        out = out[0]
        return float(out[0]) if single else out
    return out[:, 0] if single else out.T


def discrete_l2(samples) -> float:
    """Root mean square of the Euclidean norms of ``samples`` (M,) or (M, d)."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0 or len(arr) == 0:
        raise ValueError("discrete L2 norm of an empty sample set")
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples must be finite")
    if arr.ndim == 1:
        arr = arr[:, None]
    sq = np.sum(arr.reshape(len(arr), -1) ** 2, axis=1)
    return float(np.sqrt(np.mean(sq)))


def raster_l2_sq(channels: np.ndarray) -> float:
    """Squared grid norm: mean over pixels of the squared channel norm."""
    channels = np.asarray(channels)
    return float(np.sum(channels**2) / np.prod(channels.shape[-2:]))
