"""Alternating reconstruction: fluid fit, domain correction, mask update."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flowrecon.fluid import FluidConfig, FluidResult, init_networks, rasterize, train_fluid
from flowrecon.grid import VectorField2, raster_l2_sq
from flowrecon.mask import DomainMask, boundary_segments, interior, warp_mask
from flowrecon.qcmap import GeoWeights, MappingField, interior_sup_mu, train_geometry

log = logging.getLogger(__name__)

MIN_INTERIOR = 16


class MaskCollapseError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    fluid: FluidConfig = field(default_factory=FluidConfig)
    geo: GeoWeights = field(default_factory=GeoWeights)
    geo_iterations: int = 500
    geo_lr: float | None = None
    max_outer: int = 8
    window: int = 3
    rtol: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.rtol <= 0:
            raise ValueError("rtol must be positive")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.geo_iterations < 0:
            raise ValueError("geo_iterations must be >= 0")


@dataclass
class PipelineState:
    n: int
    mask_n: DomainMask
    u_hat_n: VectorField2 | None = None
    misfit: list = field(default_factory=list)
    drift: list = field(default_factory=list)
    sup_mu: list = field(default_factory=list)
    converged: bool = False
    fluid: FluidResult | None = None
    masks: list = field(default_factory=list)


def converged(history, window: int = 3, rtol: float = 1e-3) -> bool:
    """True when the last ``window`` misfits vary by less than ``rtol`` relative to the latest."""
    if len(history) < window:
        return False
    tail = np.asarray(history[-window:], dtype=np.float64)
    scale = abs(tail[-1])
    spread = tail.max() - tail.min()
    if scale == 0:
        return spread == 0
    return bool(spread / scale < rtol)


def correction_drift(c: MappingField) -> float:
    """Sup-norm distance of ``c`` from the identity, in cm."""
    d = c.displacement()
    return float(np.max(np.hypot(d[0], d[1])))


def _check_mask(mask: DomainMask, n: int):
    count = int(interior(mask).sum()) if mask.inside.any() else 0
    if count < MIN_INTERIOR:
        raise MaskCollapseError(f"mask interior collapsed to {count} pixels at outer iteration {n}")


def run(noisy: VectorField2, mask0: DomainMask, config: PipelineConfig = PipelineConfig(),
        out_dir: str | Path | None = None, callback=None):
    """Run the alternating loop from the reference mask ``mask0``.

    Returns ``(u_hat, mask, state)``.  When ``out_dir`` is given, per-iteration
    fields, masks and the misfit/drift history are written there.
    """
    if noisy.spec != mask0.spec:
        raise ValueError("noisy field and mask live on different grids")
    n_comp = mask0.n_components
    mask = mask0
    _check_mask(mask, 0)
    u_net, p_net = init_networks(noisy, mask, config.fluid)
    optim = None
    rng = np.random.default_rng(config.seed)
    state = PipelineState(0, mask)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for n in range(config.max_outer):
        state.n = n + 1
        segments = boundary_segments(mask, noisy)
        res = train_fluid(noisy, segments, mask, config.fluid, u_net, p_net, optim, rng)
        optim = res.optim
        u_hat = rasterize(u_net, mask, segments)
        misfit = raster_l2_sq(noisy.channels - u_hat.channels)
        state.misfit.append(misfit)
        state.u_hat_n, state.fluid = u_hat, res
        log.info("outer %d: misfit %.6g, mask %d px", n + 1, misfit, mask.count)
        if out is not None:
            _dump_iteration(out, n + 1, u_hat, mask, res)

        if converged(state.misfit, config.window, config.rtol):
            state.converged = True
            break
        if config.geo_iterations == 0:
            state.drift.append(0.0)
            state.sup_mu.append(0.0)
            continue

        geo = train_geometry(noisy, u_hat, config.geo, config.geo_iterations, config.seed, config.geo_lr)
        c = geo.mapping
        state.drift.append(correction_drift(c))
        state.sup_mu.append(interior_sup_mu(c))
        mask = warp_mask(mask, c, n_components=n_comp)
        _check_mask(mask, n + 1)
        state.mask_n = mask
        state.masks.append(mask)
        if callback is not None:
            callback(state)

    state.mask_n = mask
    if out is not None:
        _dump_history(out, state)
    return state.u_hat_n, mask, state


def _dump_iteration(out: Path, n: int, u_hat: VectorField2, mask: DomainMask, res: FluidResult):
    from flowrecon.io import export_mask_png, write_field, write_loss_csv

    write_field(out / f"u_hat_{n:02d}.field", u_hat)
    export_mask_png(mask, out / f"mask_{n:02d}.png")
    write_loss_csv(out / f"fluid_loss_{n:02d}.csv", res.history)


def _dump_history(out: Path, state: PipelineState):
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "misfit", "drift", "sup_mu"])
        for i, m in enumerate(state.misfit):
            d = state.drift[i] if i < len(state.drift) else ""
            s = state.sup_mu[i] if i < len(state.sup_mu) else ""
            w.writerow([i + 1, repr(m), repr(d) if d != "" else "", repr(s) if s != "" else ""])
