"""Physics-informed fit of velocity and pressure networks on a masked domain."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from flowrecon.autodiff import DEFAULT_HIDDEN, EvalWithDerivs, Mlp, NonFiniteLossError, OptimState, adam_step
from flowrecon.grid import VectorField2, sample_raster
from flowrecon.mask import SIDE_NORMALS, BoundarySegments, DomainMask, interior, polyline_lengths, point_at_length

log = logging.getLogger(__name__)

TERMS = ("data", "ns", "bdr", "in")


@dataclass(frozen=True)
class FluidWeights:
    alpha_data: float = 1.0
    alpha_ns: float = 1e-3
    alpha_bdr: float = 1.0
    alpha_in: float = 0.1

    def __post_init__(self):
        vals = (self.alpha_data, self.alpha_ns, self.alpha_bdr, self.alpha_in)
        if min(vals) < 0 or max(vals) <= 0:
            raise ValueError("fluid weights must be nonnegative with at least one positive")


@dataclass(frozen=True)
class FluidConfig:
    nu: float = 0.035
    iterations: int = 2000
    n_interior: int = 2048
    n_inlet: int = 256
    n_outlet: int = 256
    n_wall: int = 512
    weights: FluidWeights = field(default_factory=FluidWeights)
    seed: int = 0
    lr: float = 1e-3
    lr_final: float | None = None  # geometric decay target within one solve; None keeps lr fixed
    hidden: tuple = DEFAULT_HIDDEN

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if min(self.n_interior, self.n_inlet, self.n_outlet, self.n_wall) < 1:
            raise ValueError("sample counts must be >= 1")
        if self.lr <= 0 or (self.lr_final is not None and self.lr_final <= 0):
            raise ValueError("learning rates must be positive")


@dataclass
class FluidSampleSet:
    interior: np.ndarray
    inlet: np.ndarray
    outlet: np.ndarray
    outlet_normals: np.ndarray
    wall: np.ndarray


def parabolic_profile(chain_points, noisy: VectorField2, pixels=None):
    """Inlet regularization target scaled to the mean measured inflow.

    ``g(x) = 3/2 * mean(u_noisy on chain) * (1 - |q - x|^2 / (L/2)^2)`` with
    ``q`` the chain centroid and ``L`` the polyline length.
    """
    pts = np.asarray(chain_points, dtype=np.float64)
    if len(pts) < 2:
        raise ValueError("inlet chain needs at least two points")
    length = polyline_lengths(pts)[-1]
    if length <= 0:
        raise ValueError("inlet chain has zero length")
    if pixels is None:
        mean = sample_raster(noisy.spec, noisy.channels, pts).mean(axis=1)
    else:
        mean = noisy.channels[:, pixels[:, 1], pixels[:, 0]].mean(axis=1)
    q = pts.mean(axis=0)

    def g(x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        shape = 1.0 - np.sum((q - x) ** 2, axis=1) / (length / 2) ** 2
        return 1.5 * shape[:, None] * mean

    g.mean = mean
    g.centroid = q
    g.length = length
    return g


class _ChainSet:
    """Length-weighted sampling over several polylines."""

    def __init__(self, chains, spec, normals=False):
        self.polys = [ch.points(spec) for ch in chains if len(ch) >= 2]
        self.chains = [ch for ch in chains if len(ch) >= 2]
        self.cums = [polyline_lengths(p) for p in self.polys]
        lengths = np.array([c[-1] for c in self.cums])
        self.weights = lengths / lengths.sum() if len(lengths) and lengths.sum() > 0 else None
        self.normals = [np.array(SIDE_NORMALS[ch.side]) for ch in self.chains] if normals else None

    def __bool__(self):
        return self.weights is not None

    def sample(self, count, rng):
        which = rng.choice(len(self.polys), size=count, p=self.weights)
        pts = np.empty((count, 2))
        nrm = np.empty((count, 2))
        for i in range(len(self.polys)):
            sel = which == i
            n = int(sel.sum())
            if n == 0:
                continue
            pts[sel] = point_at_length(self.polys[i], self.cums[i], rng.uniform(0, self.cums[i][-1], n))
            if self.normals is not None:
                nrm[sel] = self.normals[i]
        return pts, nrm, which


class FluidProblem:
    """Sampling and loss assembly for one fixed domain."""

    def __init__(self, noisy: VectorField2, segments: BoundarySegments, mask: DomainMask, config: FluidConfig):
        if not segments.inlet:
            raise ValueError("the fluid problem needs at least one inlet")
        self.noisy = noisy
        self.mask = mask
        self.config = config
        self.spec = mask.spec
        ks, hs = np.nonzero(interior(mask))
        if len(ks) == 0:
            raise ValueError("mask has an empty interior")
        self.interior_pixels = (ks, hs)
        self.inlets = _ChainSet(segments.inlet, self.spec)
        self.outlets = _ChainSet(segments.outlet, self.spec, normals=True)
        self.walls = _ChainSet(segments.wall, self.spec)
        if not self.inlets:
            raise ValueError("inlet chains are too short to sample")
        self.profiles = [parabolic_profile(p, noisy, ch.pixels)
                         for p, ch in zip(self.inlets.polys, self.inlets.chains)]

    def sample(self, rng) -> tuple[FluidSampleSet, np.ndarray]:
        from flowrecon.mask import sample_interior

        c = self.config
        xg = sample_interior(self.mask, c.n_interior, rng, pixels=self.interior_pixels)
        xi, _, which = self.inlets.sample(c.n_inlet, rng)
        target = np.empty_like(xi)
        for i, g in enumerate(self.profiles):
            sel = which == i
            if sel.any():
                target[sel] = g(xi[sel])
        if self.outlets:
            xo, no, _ = self.outlets.sample(c.n_outlet, rng)
        else:
            xo, no = np.empty((0, 2)), np.empty((0, 2))
        xw = self.walls.sample(c.n_wall, rng)[0] if self.walls else np.empty((0, 2))
        return FluidSampleSet(xg, xi, xo, no, xw), target

    def loss_and_grads(self, u_net: Mlp, p_net: Mlp, s: FluidSampleSet, target: np.ndarray):
        """Weighted fluid loss, its four terms, and gradients for both nets."""
        c = self.config
        w = c.weights
        nu = c.nu
        parts = {}
        gu = np.zeros(u_net.n_params)
        gp = np.zeros(p_net.n_params)

        # interior: data + Navier-Stokes residual
        need_ns = w.alpha_ns > 0
        ue, ut = u_net.eval_and_tape(s.interior, 2 if need_ns else 0)
        data_val, g_data = _data_terms(ue.value, sample_raster(self.spec, self.noisy.channels, s.interior).T)
        parts["data"] = data_val
        if need_ns:
            pe, pt = p_net.eval_and_tape(s.interior, 1)
            ns_val, g_u_ns, g_p_ns = _ns_terms(ue, pe, nu)
            parts["ns"] = ns_val
            gu += u_net.backward(ut, EvalWithDerivs(w.alpha_data * g_data + w.alpha_ns * g_u_ns.value,
                                                    w.alpha_ns * g_u_ns.jacobian,
                                                    w.alpha_ns * g_u_ns.laplacian))
            gp += p_net.backward(pt, EvalWithDerivs(w.alpha_ns * g_p_ns.value, w.alpha_ns * g_p_ns.jacobian))
        else:
            parts["ns"] = _ns_terms(*_eval_pair(u_net, p_net, s.interior), nu)[0]
            gu += u_net.backward(ut, EvalWithDerivs(w.alpha_data * g_data))

        # inlet: boundary mismatch toward g^r plus the inlet regularization
        ue, ut = u_net.eval_and_tape(s.inlet, 0)
        in_val, g_in = _data_terms(ue.value, target)
        parts["in"] = in_val
        bdr = in_val
        gu += u_net.backward(ut, EvalWithDerivs((w.alpha_bdr + w.alpha_in) * g_in))

        if len(s.outlet):
            ue, ut = u_net.eval_and_tape(s.outlet, 1)
            pe, pt = p_net.eval_and_tape(s.outlet, 0)
            out_val, g_uo, g_po = _outlet_terms(ue, pe, s.outlet_normals, nu)
            bdr += out_val
            gu += u_net.backward(ut, EvalWithDerivs(w.alpha_bdr * g_uo.value, w.alpha_bdr * g_uo.jacobian))
            gp += p_net.backward(pt, EvalWithDerivs(w.alpha_bdr * g_po))
        if len(s.wall):
            ue, ut = u_net.eval_and_tape(s.wall, 0)
            wall_val = float(np.mean(np.sum(ue.value**2, axis=1)))
            bdr += wall_val
            gu += u_net.backward(ut, EvalWithDerivs(w.alpha_bdr * 2.0 * ue.value / len(s.wall)))
        parts["bdr"] = bdr

        total = (w.alpha_data * parts["data"] + w.alpha_ns * parts["ns"]
                 + w.alpha_bdr * parts["bdr"] + w.alpha_in * parts["in"])
        bad = {name: parts[name] for name in TERMS if not np.isfinite(parts[name])}
        if bad:
            raise NonFiniteLossError(f"non-finite fluid loss terms: {bad}")
        if not (np.all(np.isfinite(gu)) and np.all(np.isfinite(gp))):
            raise NonFiniteLossError("fluid loss gradient is not finite")
        return float(total), parts, gu, gp


def _eval_pair(u_net, p_net, pts):
    return u_net.forward_with_derivs(pts, 2), p_net.forward_with_derivs(pts, 1)


def _data_terms(values, target):
    diff = values - target
    return float(np.mean(np.sum(diff**2, axis=1))), 2.0 * diff / len(values)


def _ns_terms(ue: EvalWithDerivs, pe: EvalWithDerivs, nu: float):
    """Residual ``u.grad u - grad p + nu Lap u`` and divergence, with gradients."""
    U, J, L = ue.value, ue.jacobian, ue.laplacian
    gradp = pe.jacobian[:, 0, :]
    m = len(U)
    conv = np.einsum("nj,nij->ni", U, J)
    r = conv - gradp + nu * L
    div = J[:, 0, 0] + J[:, 1, 1]
    val = float(np.mean(np.sum(r**2, axis=1)) + np.mean(div**2))
    g_r = 2.0 * r / m
    g_div = 2.0 * div / m
    g_U = np.einsum("ni,nij->nj", g_r, J)
    g_J = g_r[:, :, None] * U[:, None, :]
    g_J[:, 0, 0] += g_div
    g_J[:, 1, 1] += g_div
    g_L = nu * g_r
    g_p = np.zeros_like(pe.jacobian)
    g_p[:, 0, :] = -g_r
    return val, EvalWithDerivs(g_U, g_J, g_L), EvalWithDerivs(np.zeros_like(pe.value), g_p)


def _outlet_terms(ue: EvalWithDerivs, pe: EvalWithDerivs, normals: np.ndarray, nu: float):
    """Traction residual ``(-p I + nu grad u) n`` with gradients."""
    J = ue.jacobian
    P = pe.value[:, 0]
    m = len(P)
    t = -P[:, None] * normals + nu * np.einsum("nij,nj->ni", J, normals)
    val = float(np.mean(np.sum(t**2, axis=1)))
    g_t = 2.0 * t / m
    g_P = -np.sum(g_t * normals, axis=1)[:, None]
    g_J = nu * g_t[:, :, None] * normals[:, None, :]
    return val, EvalWithDerivs(np.zeros_like(ue.value), g_J), g_P


# -- standalone loss terms ---------------------------------------------------

def ns_residual_loss(u_net: Mlp, p_net: Mlp, points, nu: float) -> float:
    return _ns_terms(*_eval_pair(u_net, p_net, points), nu)[0]


def data_loss(u_net: Mlp, points, noisy: VectorField2) -> float:
    target = sample_raster(noisy.spec, noisy.channels, np.asarray(points, dtype=np.float64)).T
    return _data_terms(u_net.forward(points), target)[0]


def inlet_reg_loss(u_net: Mlp, points, profile) -> float:
    return _data_terms(u_net.forward(points), profile(points))[0]


def boundary_loss(u_net: Mlp, p_net: Mlp, samples: FluidSampleSet, g, nu: float = 0.035) -> float:
    """Inlet mismatch + outlet traction + wall no-slip, each a mean over its samples."""
    total = 0.0
    if len(samples.inlet):
        total += _data_terms(u_net.forward(samples.inlet), g(samples.inlet))[0]
    if len(samples.outlet):
        ue = u_net.forward_with_derivs(samples.outlet, 1)
        pe = p_net.forward_with_derivs(samples.outlet, 0)
        total += _outlet_terms(ue, pe, samples.outlet_normals, nu)[0]
    if len(samples.wall):
        total += float(np.mean(np.sum(u_net.forward(samples.wall) ** 2, axis=1)))
    return total


# -- training ----------------------------------------------------------------

def velocity_scale(noisy: VectorField2, mask: DomainMask) -> float:
    speed = noisy.speed()[mask.inside]
    return float(max(np.percentile(speed, 95), 1e-6)) if speed.size else 1.0


def init_networks(noisy: VectorField2, mask: DomainMask, config: FluidConfig) -> tuple[Mlp, Mlp]:
    """Velocity and pressure networks with inputs normalized to the image extent."""
    ex, ey = noisy.spec.extent
    kw = dict(in_shift=(ex / 2, ey / 2), in_scale=(2 / ex, 2 / ey))
    scale = velocity_scale(noisy, mask)
    u_net = Mlp([2, *config.hidden, 2], seed=config.seed, out_scale=scale, **kw)
    p_net = Mlp([2, *config.hidden, 1], seed=config.seed + 1, out_scale=scale**2 / 10, **kw)
    return u_net, p_net


@dataclass
class FluidResult:
    u_net: Mlp
    p_net: Mlp
    history: np.ndarray  # (steps, 5): data, ns, bdr, in, total
    optim: tuple = (None, None)


def train_fluid(noisy: VectorField2, segments: BoundarySegments, mask: DomainMask,
                config: FluidConfig = FluidConfig(), u_net: Mlp | None = None, p_net: Mlp | None = None,
                optim: tuple | None = None, rng=None) -> FluidResult:
    """Run ``config.iterations`` Adam steps on the composite fluid loss.

    Networks (and optimizer states) passed in are warm-started and updated in
    place; fresh collocation points are drawn every step.
    """
    problem = FluidProblem(noisy, segments, mask, config)
    if u_net is None or p_net is None:
        u_net, p_net = init_networks(noisy, mask, config)
    su, sp_ = optim if optim is not None else (OptimState(lr=config.lr), OptimState(lr=config.lr))
    rng = np.random.default_rng(config.seed) if rng is None else rng
    hist = np.empty((config.iterations, 5))
    lrs = np.full(config.iterations, config.lr)
    if config.lr_final is not None and config.iterations > 1:
        lrs = np.geomspace(config.lr, config.lr_final, config.iterations)
    for it in range(config.iterations):
        su.lr = sp_.lr = float(lrs[it])
        samples, target = problem.sample(rng)
        try:
            total, parts, gu, gp = problem.loss_and_grads(u_net, p_net, samples, target)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"step {it}: {exc}") from exc
        hist[it] = [parts[t] for t in TERMS] + [total]
        adam_step(u_net.params, gu, su)
        adam_step(p_net.params, gp, sp_)
    return FluidResult(u_net, p_net, hist, (su, sp_))


def rasterize(u_net: Mlp, mask: DomainMask, segments: BoundarySegments | None = None) -> VectorField2:
    """Network velocity at the pixel centers of the mask, zero elsewhere.

    Every mask pixel is either interior or an inlet, outlet or wall edge
    pixel, so the case split reduces to membership in the mask.
    """
    spec = mask.spec
    X, Y = spec.centers()
    inside = mask.inside
    out = np.zeros((2,) + spec.shape)
    if inside.any():
        vals = u_net.forward(np.column_stack([X[inside], Y[inside]]))
        out[0][inside] = vals[:, 0]
        out[1][inside] = vals[:, 1]
    return VectorField2(spec, out[0], out[1])
