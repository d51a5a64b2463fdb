"""Synthetic ground truth: parametric vessels, a steady Navier-Stokes solver, noise.

The reference solver marches the incompressible Navier-Stokes equations to a
steady state with an explicit projection method on a staggered (MAC) grid
whose cells are the image pixels.  Velocity lives on cell faces, pressure at
cell centers.  Convection is first-order upwind, diffusion is the 5-point
stencil, and the pressure Poisson matrix is factorized once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from flowrecon.grid import GridSpec, VectorField2
from flowrecon.mask import EIGHT, DomainMask, SIDE_NORMALS

log = logging.getLogger(__name__)

KINDS = ("straight_channel", "converging_channel", "aorta_like")


class SolverDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Opening:
    """Straight inflow or outflow segment on one image side, from ``a`` to ``b`` (cm)."""

    side: str
    a: float
    b: float

    @property
    def length(self) -> float:
        return self.b - self.a

    def endpoints(self, spec: GridSpec) -> np.ndarray:
        ex, ey = spec.extent
        if self.side in ("left", "right"):
            x = 0.0 if self.side == "left" else ex
            return np.array([[x, self.a], [x, self.b]])
        y = 0.0 if self.side == "bottom" else ey
        return np.array([[self.a, y], [self.b, y]])


@dataclass(frozen=True, eq=False)
class Geometry:
    kind: str
    spec: GridSpec
    params: dict
    inlets: tuple
    outlets: tuple
    inside: object = field(repr=False)  # vectorized (x, y) -> bool, strictly inside the lumen

    def fluid_cells(self, spec: GridSpec | None = None) -> np.ndarray:
        spec = spec or self.spec
        X, Y = spec.centers()
        return np.asarray(self.inside(X, Y), dtype=bool)

    def side_types(self) -> dict:
        types = {s: "wall" for s in SIDE_NORMALS}
        for o in self.inlets:
            types[o.side] = "inlet"
        for o in self.outlets:
            types[o.side] = "outlet"
        return types


@dataclass(frozen=True)
class SynthConfig:
    v: float = 5.0
    nu: float = 0.035
    refine: int = 1
    tol: float = 1e-8
    max_steps: int = 200_000
    cfl: float = 0.4

    def __post_init__(self):
        if self.v < 0:
            raise ValueError("peak inlet velocity must be nonnegative")
        if self.nu <= 0 or self.tol <= 0:
            raise ValueError("viscosity and tolerance must be positive")
        if self.refine < 1:
            raise ValueError("refine must be >= 1")


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * t)


def make_geometry(kind: str, resolution: int = 128, **params):
    """Build a preset vessel; returns ``(DomainMask, Geometry)``.

    The mask is the set of pixels inside the lumen plus a one-pixel wall layer,
    so wall-edge pixels of the mask carry zero velocity.
    """
    if kind == "straight_channel":
        size = params.setdefault("size", 40.0)
        width = params.setdefault("width", 20.0)
        yc = params.setdefault("center", size / 2)
        if not 0 < width < size or not (width / 2 < yc < size - width / 2):
            raise ValueError("straight channel must fit inside the image")
        lo, hi = yc - width / 2, yc + width / 2

        def inside(x, y):
            return (y > lo) & (y < hi) & (x >= 0)

        inlets = (Opening("left", lo, hi),)
        outlets = (Opening("right", lo, hi),)
    elif kind == "converging_channel":
        size = params.setdefault("size", 40.0)
        w_in = params.setdefault("inlet_width", 20.0)
        w_out = params.setdefault("outlet_width", 10.0)
        x0 = params.setdefault("taper_start", 10.0)
        x1 = params.setdefault("taper_end", 30.0)
        yc = params.setdefault("center", size / 2)
        shift = params.setdefault("wall_shift", 0.0)
        wobble = params.setdefault("wobble", 0.0)
        if not (0 <= x0 < x1 <= size) or w_out <= 0 or w_in <= 0:
            raise ValueError("invalid converging channel parameters")
        if yc + w_in / 2 + shift + abs(wobble) >= size or yc - w_in / 2 - shift - abs(wobble) <= 0:
            raise ValueError("converging channel does not fit inside the image")

        def half_width(x):
            hw = w_in / 2 + (w_out - w_in) / 2 * _smoothstep((x - x0) / (x1 - x0))
            return hw + shift + wobble * np.sin(2 * np.pi * x / size)

        if np.any(half_width(np.linspace(0, size, 256)) <= 0):
            raise ValueError("converging channel walls intersect")

        def inside(x, y):
            return np.abs(y - yc) < half_width(x)

        inlets = (Opening("left", yc - half_width(0.0), yc + half_width(0.0)),)
        outlets = (Opening("right", yc - half_width(size), yc + half_width(size)),)
    elif kind == "aorta_like":
        size = params.setdefault("size", 8.0)
        bend = params.setdefault("bend_radius", 4.0)
        radius = params.setdefault("radius", 2.0)
        bulge = params.setdefault("bulge", 0.0)
        shift = params.setdefault("wall_shift", 0.0)
        if radius + shift >= bend or bend + radius + shift + abs(bulge) >= size:
            raise ValueError("aorta-like tube self-intersects or leaves the image")

        def tube_radius(theta):
            return radius + shift + bulge * np.sin(2 * theta) ** 2

        def inside(x, y):
            r = np.hypot(x, y)
            theta = np.arctan2(y, x)
            return (x >= 0) & (y >= 0) & (np.abs(r - bend) < tube_radius(theta))

        r0 = tube_radius(np.pi / 2)
        inlets = (Opening("left", bend - r0, bend + r0),)
        outlets = (Opening("bottom", bend - r0, bend + r0),)
    else:
        raise ValueError(f"unknown geometry {kind!r}; expected one of {KINDS}")

    spec = GridSpec(resolution, resolution, size / resolution)
    geo = Geometry(kind, spec, dict(params), inlets, outlets, inside)
    fluid = geo.fluid_cells()
    if not fluid.any():
        raise ValueError("geometry has no fluid pixels at this resolution")
    mask = DomainMask(spec, ndimage.binary_dilation(fluid, structure=EIGHT))
    return mask, geo


def inlet_profile(chain_points, v: float, inward=None):
    """Parabolic inflow ``v (1 - |q - x|^2 / (L/2)^2)`` over a straight chain.

    ``chain_points`` is an ordered ``(n, 2)`` polyline; ``q`` is its centroid
    and ``L`` its length.  The velocity points along ``inward`` (unit vector),
    defaulting to the left-hand normal of the chain direction.
    """
    pts = np.asarray(chain_points, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    length = float(np.sum(np.hypot(*seg.T)))
    if length <= 0:
        raise ValueError("inlet chain has zero length")
    q = pts.mean(axis=0)
    if inward is None:
        t = (pts[-1] - pts[0]) / np.linalg.norm(pts[-1] - pts[0])
        inward = np.array([-t[1], t[0]])
    inward = np.asarray(inward, dtype=np.float64)

    def g(x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mag = v * (1.0 - np.sum((q - x) ** 2, axis=1) / (length / 2) ** 2)
        return mag[:, None] * inward

    return g


# -- staggered-grid solver ---------------------------------------------------

@dataclass
class SolverReport:
    steps: int
    converged: bool
    last_change: float
    max_divergence: float
    u_faces: np.ndarray = field(repr=False)
    v_faces: np.ndarray = field(repr=False)
    fluid: np.ndarray = field(repr=False)
    h: float = 0.0


class _MacGrid:
    """Face bookkeeping and projection operators for a masked MAC grid."""

    def __init__(self, fluid: np.ndarray, h: float, sides: dict):
        self.F = fluid
        self.h = h
        self.sides = sides
        ny, nx = fluid.shape
        F = fluid
        # u faces (ny, nx+1), v faces (ny+1, nx)
        self.u_active = np.zeros((ny, nx + 1), bool)
        self.u_active[:, 1:-1] = F[:, :-1] & F[:, 1:]
        self.v_active = np.zeros((ny + 1, nx), bool)
        self.v_active[1:-1, :] = F[:-1, :] & F[1:, :]

        self.u_in = np.zeros_like(self.u_active)
        self.u_out = np.zeros_like(self.u_active)
        self.v_in = np.zeros_like(self.v_active)
        self.v_out = np.zeros_like(self.v_active)
        for side, kind in sides.items():
            if kind == "wall":
                continue
            arr = {("left", "inlet"): (self.u_in, np.s_[:, 0], F[:, 0]),
                   ("right", "inlet"): (self.u_in, np.s_[:, -1], F[:, -1]),
                   ("left", "outlet"): (self.u_out, np.s_[:, 0], F[:, 0]),
                   ("right", "outlet"): (self.u_out, np.s_[:, -1], F[:, -1]),
                   ("bottom", "inlet"): (self.v_in, np.s_[0, :], F[0, :]),
                   ("top", "inlet"): (self.v_in, np.s_[-1, :], F[-1, :]),
                   ("bottom", "outlet"): (self.v_out, np.s_[0, :], F[0, :]),
                   ("top", "outlet"): (self.v_out, np.s_[-1, :], F[-1, :])}[(side, kind)]
            arr[0][arr[1]] = arr[2]

        self.cell_id = -np.ones(F.shape, np.intp)
        self.cell_id[F] = np.arange(F.sum())
        self._build_operators()

    def _build_operators(self):
        h, F, cid = self.h, self.F, self.cell_id
        ny, nx = F.shape
        u_free = self.u_active | self.u_out
        v_free = self.v_active | self.v_out
        self.u_free, self.v_free = u_free, v_free
        self.u_idx = np.flatnonzero(u_free)
        self.v_idx = np.flatnonzero(v_free)
        nu_f = len(self.u_idx)

        rows, cols, vals = [], [], []
        for n, flat in enumerate(self.u_idx):
            j, i = divmod(flat, nx + 1)
            if 0 < i < nx:
                rows += [n, n]
                cols += [cid[j, i], cid[j, i - 1]]
                vals += [1 / h, -1 / h]
            elif i == nx:
                rows.append(n)
                cols.append(cid[j, nx - 1])
                vals.append(-2 / h)
            else:
                rows.append(n)
                cols.append(cid[j, 0])
                vals.append(2 / h)
        for n, flat in enumerate(self.v_idx):
            j, i = divmod(flat, nx)
            r = nu_f + n
            if 0 < j < ny:
                rows += [r, r]
                cols += [cid[j, i], cid[j - 1, i]]
                vals += [1 / h, -1 / h]
            elif j == ny:
                rows.append(r)
                cols.append(cid[ny - 1, i])
                vals.append(-2 / h)
            else:
                rows.append(r)
                cols.append(cid[0, i])
                vals.append(2 / h)
        n_cells = int(F.sum())
        self.G = sp.csr_matrix((vals, (rows, cols)), shape=(nu_f + len(self.v_idx), n_cells))
        # divergence of the free faces: +1/h on the cell behind, -1/h on the cell ahead
        rows, cols, vals = [], [], []
        for n, flat in enumerate(self.u_idx):
            j, i = divmod(flat, nx + 1)
            if i > 0:
                rows.append(cid[j, i - 1]); cols.append(n); vals.append(1 / h)
            if i < nx:
                rows.append(cid[j, i]); cols.append(n); vals.append(-1 / h)
        for n, flat in enumerate(self.v_idx):
            j, i = divmod(flat, nx)
            if j > 0:
                rows.append(cid[j - 1, i]); cols.append(nu_f + n); vals.append(1 / h)
            if j < ny:
                rows.append(cid[j, i]); cols.append(nu_f + n); vals.append(-1 / h)
        self.D = sp.csr_matrix((vals, (rows, cols)), shape=(n_cells, self.G.shape[0]))
        lap = (self.D @ self.G).tocsc()
        if not (self.u_out.any() or self.v_out.any()):
            lap = lap.tolil()
            lap[0, :] = 0
            lap[0, 0] = 1
            lap = lap.tocsc()
            self._pinned = True
        else:
            self._pinned = False
        self.lu = spla.splu(lap)

    def divergence(self, U, V):
        div = (U[:, 1:] - U[:, :-1] + V[1:, :] - V[:-1, :]) / self.h
        return np.where(self.F, div, 0.0)

    def project(self, U, V, dt):
        div = self.divergence(U, V)[self.F]
        rhs = div / dt
        if self._pinned:
            rhs[0] = 0.0
        p = self.lu.solve(rhs)
        corr = dt * (self.G @ p)
        nu_f = len(self.u_idx)
        U.flat[self.u_idx] -= corr[:nu_f]
        V.flat[self.v_idx] -= corr[nu_f:]
        return p


def _ghost_coef(flow: np.ndarray, lo_outlet: bool, hi_outlet: bool):
    """Coefficients for the tangential neighbours above/below each face.

    Returns ``(up_valid, up_coef, dn_valid, dn_coef)``; where the neighbour
    face is not a flow face its value is ``coef * self`` (no-slip mirror, or
    zero-gradient at an outlet side).
    """
    up_valid = np.zeros_like(flow)
    up_valid[:-1] = flow[1:]
    dn_valid = np.zeros_like(flow)
    dn_valid[1:] = flow[:-1]
    up_coef = -np.ones(flow.shape)
    dn_coef = -np.ones(flow.shape)
    if hi_outlet:
        up_coef[-1] = 1.0
    if lo_outlet:
        dn_coef[0] = 1.0
    return up_valid, up_coef, dn_valid, dn_coef


def _momentum(A, B, flow, ghosts, nu, h):
    """Explicit RHS ``-(a . grad) a + nu Lap a`` for the face component ``A``.

    ``A`` has shape (ny, nx+1) and is normal to the x direction of its own
    frame; ``B`` is the other component with shape (ny+1, nx).
    """
    up_valid, up_coef, dn_valid, dn_coef = ghosts
    Ac = A[:, 1:-1]
    left = A[:, :-2]
    right = A[:, 2:]
    up = np.empty_like(A)
    up[:-1] = A[1:]
    up[-1] = 0.0
    up = np.where(up_valid, up, up_coef * A)[:, 1:-1]
    dn = np.empty_like(A)
    dn[1:] = A[:-1]
    dn[0] = 0.0
    dn = np.where(dn_valid, dn, dn_coef * A)[:, 1:-1]
    bbar = 0.25 * (B[:-1, :-1] + B[:-1, 1:] + B[1:, :-1] + B[1:, 1:])
    dadx = np.where(Ac > 0, Ac - left, right - Ac) / h
    dady = np.where(bbar > 0, Ac - dn, up - Ac) / h
    lap = (left + right + up + dn - 4 * Ac) / h**2
    out = np.zeros_like(A)
    out[:, 1:-1] = -(Ac * dadx + bbar * dady) + nu * lap
    return out


_TRANSPOSED_SIDE = {"left": "bottom", "right": "top", "bottom": "left", "top": "right"}


def solve_steady(fluid: np.ndarray, h: float, sides: dict, inflow, nu: float, tol: float = 1e-8,
                 max_steps: int = 200_000, cfl: float = 0.4) -> SolverReport:
    """March to steady state; ``inflow(side, x, y)`` gives inward normal speed."""
    grid = _MacGrid(fluid, h, sides)
    ny, nx = fluid.shape
    U = np.zeros((ny, nx + 1))
    V = np.zeros((ny + 1, nx))

    # inflow boundary values at face centers
    ys = (np.arange(ny) + 0.5) * h
    xs = (np.arange(nx) + 0.5) * h
    for side, kind in sides.items():
        if kind != "inlet":
            continue
        if side == "left":
            U[:, 0] = np.where(grid.u_in[:, 0], inflow(side, np.zeros(ny), ys), 0.0)
        elif side == "right":
            U[:, -1] = -np.where(grid.u_in[:, -1], inflow(side, np.full(ny, nx * h), ys), 0.0)
        elif side == "bottom":
            V[0, :] = np.where(grid.v_in[0, :], inflow(side, xs, np.zeros(nx)), 0.0)
        else:
            V[-1, :] = -np.where(grid.v_in[-1, :], inflow(side, xs, np.full(nx, ny * h)), 0.0)

    u_flow = grid.u_free | grid.u_in
    v_flow = grid.v_free | grid.v_in
    u_ghost = _ghost_coef(u_flow, sides["bottom"] == "outlet", sides["top"] == "outlet")
    v_ghost = _ghost_coef(v_flow.T, sides["left"] == "outlet", sides["right"] == "outlet")

    umax = max(np.abs(U).max(), np.abs(V).max(), 1e-12)
    grid.project(U, V, 1.0)
    if umax <= 1e-12:
        return SolverReport(0, True, 0.0, 0.0, U, V, fluid, h)

    change = np.inf
    step = 0
    for step in range(1, max_steps + 1):
        umax = max(np.abs(U).max(), np.abs(V).max(), 1e-12)
        dt = min(cfl * h / umax, 0.2 * h * h / nu)
        ru = _momentum(U, V, u_flow, u_ghost, nu, h)
        rv = _momentum(V.T, U.T, v_flow.T, v_ghost, nu, h).T
        Un = U + dt * np.where(grid.u_active, ru, 0.0)
        Vn = V + dt * np.where(grid.v_active, rv, 0.0)
        # zero-gradient predictor on outlet faces
        if grid.u_out[:, -1].any():
            Un[:, -1] = np.where(grid.u_out[:, -1], Un[:, -2], Un[:, -1])
        if grid.u_out[:, 0].any():
            Un[:, 0] = np.where(grid.u_out[:, 0], Un[:, 1], Un[:, 0])
        if grid.v_out[-1, :].any():
            Vn[-1, :] = np.where(grid.v_out[-1, :], Vn[-2, :], Vn[-1, :])
        if grid.v_out[0, :].any():
            Vn[0, :] = np.where(grid.v_out[0, :], Vn[1, :], Vn[0, :])
        grid.project(Un, Vn, dt)
        change = max(np.abs(Un - U).max(), np.abs(Vn - V).max())
        U, V = Un, Vn
        if not np.isfinite(change):
            raise SolverDivergedError(f"reference solver blew up at step {step}")
        if change < tol:
            break
    converged = change < tol
    div = np.abs(grid.divergence(U, V)).max()
    if not converged:
        log.warning("reference solver stopped after %d steps, last change %.3g", step, change)
    return SolverReport(step, bool(converged), float(change), float(div), U, V, fluid, h)


def _geometry_inflow(geo: Geometry, v: float):
    profiles = {}
    for o in geo.inlets:
        inward = -np.array(SIDE_NORMALS[o.side])
        profiles[o.side] = (inlet_profile(o.endpoints(geo.spec), v, inward), inward)

    def inflow(side, x, y):
        g, inward = profiles[side]
        vel = g(np.column_stack([x, y]))
        return np.maximum(vel @ inward, 0.0)

    return inflow


def solve_reference(geo: Geometry, config: SynthConfig = SynthConfig(), report: bool = False):
    """Steady ground-truth velocity on the pixel grid (zero outside the lumen)."""
    spec = geo.spec
    r = config.refine
    fine = GridSpec(spec.H * r, spec.K * r, spec.eps / r)
    fluid = geo.fluid_cells(fine)
    rep = solve_steady(fluid, fine.eps, geo.side_types(), _geometry_inflow(geo, config.v),
                       config.nu, config.tol, config.max_steps, config.cfl)
    uc = 0.5 * (rep.u_faces[:, :-1] + rep.u_faces[:, 1:]) * fluid
    vc = 0.5 * (rep.v_faces[:-1, :] + rep.v_faces[1:, :]) * fluid
    if r > 1:
        uc = uc.reshape(spec.K, r, spec.H, r).mean(axis=(1, 3))
        vc = vc.reshape(spec.K, r, spec.H, r).mean(axis=(1, 3))
    keep = geo.fluid_cells()
    field_ = VectorField2(spec, uc * keep, vc * keep)
    return (field_, rep) if report else field_


def column_fluxes(field_: VectorField2) -> np.ndarray:
    """Volume flux (per unit depth) of u_x through every pixel column."""
    return field_.u_x.sum(axis=0) * field_.spec.eps


# -- noise -------------------------------------------------------------------

def add_gaussian(field_: VectorField2, sigma: float, rng) -> VectorField2:
    """I.i.d. ``N(0, sigma^2)`` added to both channels of every pixel."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return field_
    noise = rng.normal(0.0, sigma, size=(2,) + field_.spec.shape)
    return VectorField2(field_.spec, field_.u_x + noise[0], field_.u_y + noise[1])


def add_signal_noise(field_: VectorField2, rng, sigma_floor: float = 3.0) -> VectorField2:
    """Signal-dependent noise ``u + sqrt(|u|) n1 + n2``, ``n1 ~ N(0,1)``, ``n2 ~ N(0, 3^2)``."""
    n1 = rng.normal(0.0, 1.0, size=(2,) + field_.spec.shape)
    n2 = rng.normal(0.0, sigma_floor, size=(2,) + field_.spec.shape)
    amp = np.sqrt(field_.speed())
    return VectorField2(field_.spec, field_.u_x + amp * n1[0] + n2[0], field_.u_y + amp * n1[1] + n2[1])


def gaussian_sigma(level: str, v: float) -> float:
    """Noise level presets for Gaussian corruption: 5% / 25% of the peak speed."""
    return {"low": 0.05, "high": 0.25}[level] * v
