"""Quasi-conformal correction maps on the image grid.

A mapping ``c`` is stored per pixel as target coordinates ``c(x) = x + d(x)``
with the displacement ``d`` in cm.  The geometry subproblem

    min_d  a_reg |u_noisy - u_rec o c|^2 + a_bc |exp(|mu(c)| - 1)|^2 + a_lap |Lap c|^2

is solved by Adam on ``d``, starting from the identity, with exact gradients
of all three terms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from flowrecon.autodiff import NonFiniteLossError, OptimState, adam_step
from flowrecon.grid import GridSpec, ScalarField, VectorField2, bilinear_weights

log = logging.getLogger(__name__)

DENOM_GUARD = 1e-12


@dataclass(frozen=True, eq=False)
class MappingField:
    spec: GridSpec
    target_x: np.ndarray
    target_y: np.ndarray

    def __post_init__(self):
        for name in ("target_x", "target_y"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != self.spec.shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {self.spec.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite coordinates")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls, spec: GridSpec) -> "MappingField":
        X, Y = spec.centers()
        return cls(spec, X, Y)

    @classmethod
    def from_displacement(cls, spec: GridSpec, disp: np.ndarray) -> "MappingField":
        X, Y = spec.centers()
        return cls(spec, X + disp[0], Y + disp[1])

    def displacement(self) -> np.ndarray:
        X, Y = self.spec.centers()
        return np.stack([self.target_x - X, self.target_y - Y])

    def __call__(self, pts) -> np.ndarray:
        """Evaluate the mapping off-grid by bilinear interpolation of the targets."""
        from flowrecon.grid import sample_raster

        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return sample_raster(self.spec, np.stack([self.target_x, self.target_y]), pts).T


@dataclass(frozen=True, eq=False)
class BeltramiField:
    spec: GridSpec
    mu_re: np.ndarray
    mu_im: np.ndarray
    degenerate: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return self.mu_re + 1j * self.mu_im

    def abs(self) -> np.ndarray:
        return np.hypot(self.mu_re, self.mu_im)


@dataclass(frozen=True)
class GeoWeights:
    alpha_reg: float = 1.0
    alpha_bc: float = 10.0
    alpha_lap: float = 1.0

    def __post_init__(self):
        if self.alpha_reg <= 0:
            raise ValueError("alpha_reg must be positive")
        if self.alpha_bc < 0 or self.alpha_lap < 0:
            raise ValueError("geometry weights must be nonnegative")


# -- finite-difference operators ---------------------------------------------

def _diff_1d(n: int, h: float) -> sp.csr_matrix:
    # central in the interior, one-sided at both ends
    if n < 2:
        return sp.csr_matrix((n, n))
    rows, cols, vals = [0, 0, n - 1, n - 1], [0, 1, n - 2, n - 1], [-1 / h, 1 / h, -1 / h, 1 / h]
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _lap_1d(n: int, h: float) -> sp.csr_matrix:
    # second difference with mirror padding that excludes the edge sample
    if n < 3:
        return sp.csr_matrix((n, n))
    m = sp.lil_matrix((n, n))
    for i in range(n):
        lo = i - 1 if i > 0 else 1
        hi = i + 1 if i < n - 1 else n - 2
        m[i, lo] += 1 / h**2
        m[i, hi] += 1 / h**2
        m[i, i] -= 2 / h**2
    return m.tocsr()


@lru_cache(maxsize=8)
def _operators(spec: GridSpec):
    """Sparse ``(Dx, Dy, Lap)`` acting on rasters flattened in row-major order."""
    ix, iy = sp.identity(spec.H), sp.identity(spec.K)
    Dx = sp.kron(iy, _diff_1d(spec.H, spec.eps)).tocsr()
    Dy = sp.kron(_diff_1d(spec.K, spec.eps), ix).tocsr()
    Lap = (sp.kron(iy, _lap_1d(spec.H, spec.eps)) + sp.kron(_lap_1d(spec.K, spec.eps), ix)).tocsr()
    return Dx, Dy, Lap


def _complex_derivs(spec, tx, ty):
    Dx, Dy, _ = _operators(spec)
    cz = (tx + 1j * ty).ravel()
    return Dx @ cz, Dy @ cz


def _beltrami_flat(spec, tx, ty):
    a, b = _complex_derivs(spec, tx, ty)
    fz = 0.5 * (a - 1j * b)
    fzb = 0.5 * (a + 1j * b)
    mag = np.abs(fz)
    degenerate = mag < DENOM_GUARD
    safe = np.where(degenerate, DENOM_GUARD, fz)
    return fzb / safe, fz, fzb, safe, degenerate


def beltrami(c: MappingField) -> BeltramiField:
    """Beltrami coefficient ``f_zbar / f_z`` by finite differences."""
    if c.spec.H < 3 or c.spec.K < 3:
        raise ValueError("Beltrami coefficient needs at least a 3x3 grid")
    mu, _, _, _, deg = _beltrami_flat(c.spec, c.target_x, c.target_y)
    shape = c.spec.shape
    return BeltramiField(c.spec, mu.real.reshape(shape), mu.imag.reshape(shape), deg.reshape(shape))


def mapping_laplacian(c: MappingField) -> np.ndarray:
    """5-point Laplacian of each target channel, shape ``(2, K, H)``.

    Applied to the displacement with mirror padding, so the identity and all
    translations give exactly zero and affine maps give zero off the border.
    """
    if c.spec.H < 3 or c.spec.K < 3:
        raise ValueError("mapping Laplacian needs at least a 3x3 grid")
    _, _, Lap = _operators(c.spec)
    d = c.displacement().reshape(2, -1)
    return np.stack([Lap @ d[0], Lap @ d[1]]).reshape((2,) + c.spec.shape)


def interior_sup_mu(c: MappingField) -> float:
    return float(beltrami(c).abs()[1:-1, 1:-1].max())


# -- composition and losses --------------------------------------------------

def _sample_with_grad(spec: GridSpec, channels: np.ndarray, tx, ty):
    """Bilinear samples at targets, zero outside the physical extent, plus d/dx, d/dy."""
    pts = np.column_stack([np.ravel(tx), np.ravel(ty)])
    h0, h1, k0, k1, fx, fy, in_x, in_y = bilinear_weights(spec, pts)
    ex, ey = spec.extent
    inside = (pts[:, 0] >= 0) & (pts[:, 0] <= ex) & (pts[:, 1] >= 0) & (pts[:, 1] <= ey)
    a00 = channels[:, k0, h0]
    a10 = channels[:, k0, h1]
    a01 = channels[:, k1, h0]
    a11 = channels[:, k1, h1]
    lo = a00 * (1 - fx) + a10 * fx
    hi = a01 * (1 - fx) + a11 * fx
    val = (lo * (1 - fy) + hi * fy) * inside
    gx = ((a10 - a00) * (1 - fy) + (a11 - a01) * fy) / spec.eps * (inside & in_x)
    gy = (hi - lo) / spec.eps * (inside & in_y)
    return val, gx, gy


def compose_field(field: VectorField2 | ScalarField, c: MappingField):
    """``field o c``: bilinear samples at ``c(x)`` per pixel, zero outside the extent."""
    if field.spec != c.spec:
        raise ValueError("field and mapping live on different grids")
    val, _, _ = _sample_with_grad(c.spec, field.channels, c.target_x, c.target_y)
    val = val.reshape((-1,) + c.spec.shape)
    if isinstance(field, ScalarField):
        return ScalarField(c.spec, val[0])
    return VectorField2(c.spec, val[0], val[1])


def registration_loss(noisy: VectorField2, recon: VectorField2, c: MappingField) -> float:
    if not (noisy.spec == recon.spec == c.spec):
        raise ValueError("fields and mapping live on different grids")
    warped = compose_field(recon, c)
    return float(np.mean(np.sum((noisy.channels - warped.channels) ** 2, axis=0)))


def geo_losses(c: MappingField) -> tuple[float, float]:
    """``(bc_loss, lap_loss)`` for a mapping."""
    b = beltrami(c)
    if b.degenerate.any():
        log.warning("Beltrami coefficient degenerate at %d pixels", int(b.degenerate.sum()))
    bc = float(np.mean(np.exp(2.0 * (b.abs() - 1.0))))
    lap = float(np.mean(np.sum(mapping_laplacian(c) ** 2, axis=0)))
    return bc, lap


class GeometryObjective:
    """Geometry loss and its gradient w.r.t. the displacement ``(2, K, H)``."""

    def __init__(self, noisy: VectorField2, recon: VectorField2, weights: GeoWeights):
        if noisy.spec != recon.spec:
            raise ValueError("noisy and reconstructed fields live on different grids")
        self.spec = noisy.spec
        self.noisy = noisy.channels
        self.recon = recon.channels
        self.weights = weights
        self.X, self.Y = self.spec.centers()

    def terms(self, disp: np.ndarray):
        """Return ``(total, parts, grad)`` with ``parts = (reg, bc, lap)``."""
        spec, w = self.spec, self.weights
        n = spec.H * spec.K
        Dx, Dy, Lap = _operators(spec)
        tx = self.X + disp[0]
        ty = self.Y + disp[1]

        val, gx, gy = _sample_with_grad(spec, self.recon, tx, ty)
        resid = self.noisy.reshape(2, -1) - val
        reg = np.sum(resid**2) / n
        g_reg = -2.0 / n * np.stack([np.sum(resid * gx, axis=0), np.sum(resid * gy, axis=0)])

        mu, _, _, safe, _ = _beltrami_flat(spec, tx, ty)
        amu = np.abs(mu)
        e = np.exp(2.0 * (amu - 1.0))
        bc = np.sum(e) / n
        # gradient w.r.t. (Re mu, Im mu) packed as a complex number; zero at mu = 0
        g_mu = np.where(amu > 0, (2.0 / n) * e * mu / np.where(amu > 0, amu, 1.0), 0.0)
        g_num = g_mu * np.conj(1.0 / safe)
        g_den = g_mu * np.conj(-mu / safe)
        g_c = Dx.T @ (0.5 * (g_num + g_den)) + Dy.T @ (0.5j * (g_den - g_num))
        g_bc = np.stack([g_c.real, g_c.imag])

        d = disp.reshape(2, -1)
        ld = np.stack([Lap @ d[0], Lap @ d[1]])
        lap = np.sum(ld**2) / n
        g_lap = (2.0 / n) * np.stack([Lap.T @ ld[0], Lap.T @ ld[1]])

        grad = w.alpha_reg * g_reg + w.alpha_bc * g_bc + w.alpha_lap * g_lap
        total = w.alpha_reg * reg + w.alpha_bc * bc + w.alpha_lap * lap
        return float(total), (float(reg), float(bc), float(lap)), grad.reshape(disp.shape)

    def __call__(self, disp):
        return self.terms(disp)[0]


@dataclass
class GeometryResult:
    mapping: MappingField
    history: list  # (total, reg, bc, lap) per step


def train_geometry(noisy: VectorField2, recon: VectorField2, weights: GeoWeights = GeoWeights(),
                   iterations: int = 500, seed: int = 0, lr: float | None = None) -> GeometryResult:
    """Fit a correction map registering ``recon`` onto ``noisy``.

    Starts from the identity.  ``lr`` is the Adam step in cm and defaults to
    5% of the pixel pitch.  ``seed`` is accepted for interface symmetry; the
    optimization itself involves no randomness.
    """
    del seed
    spec = noisy.spec
    obj = GeometryObjective(noisy, recon, weights)
    disp = np.zeros((2,) + spec.shape)
    state = OptimState(lr=0.05 * spec.eps if lr is None else lr)
    history = []
    for it in range(iterations):
        total, parts, grad = obj.terms(disp)
        if not (np.isfinite(total) and np.all(np.isfinite(grad))):
            raise NonFiniteLossError(f"geometry loss became non-finite at step {it}: {parts}")
        history.append((total, *parts))
        adam_step(disp, grad, state)
    total, parts, _ = obj.terms(disp)
    history.append((total, *parts))
    return GeometryResult(MappingField.from_displacement(spec, disp), history)
