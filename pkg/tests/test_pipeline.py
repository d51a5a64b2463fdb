import csv

import numpy as np
import pytest

from flowrecon import pipeline
from flowrecon.autodiff import Mlp
from flowrecon.fluid import FluidConfig, FluidResult, rasterize
from flowrecon.grid import GridSpec, VectorField2
from flowrecon.mask import DomainMask
from flowrecon.pipeline import MaskCollapseError, PipelineConfig, converged, correction_drift, run
from flowrecon.qcmap import MappingField
from flowrecon.synth import make_geometry, solve_reference

TINY = FluidConfig(iterations=30, n_interior=128, n_inlet=16, n_outlet=16, n_wall=32, hidden=(10, 10))


@pytest.fixture(scope="module")
def small_channel():
    mask, geo = make_geometry("straight_channel", 32)
    return mask, solve_reference(geo)


def test_converged_examples():
    assert converged([5.0, 5.0, 5.0, 5.0], 3)
    assert not converged([5.0, 4.0], 3)
    assert converged([10, 9.99, 9.985, 9.984], 3, 1e-3)
    assert not converged([10, 9.9, 9.8], 3, 1e-3)
    assert converged([0.0, 0.0, 0.0], 3)


def test_correction_drift_examples():
    spec = GridSpec(6, 5, 0.5)
    assert correction_drift(MappingField.identity(spec)) == 0.0
    X, Y = spec.centers()
    assert correction_drift(MappingField(spec, X + spec.eps, Y)) == pytest.approx(spec.eps, rel=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(max_outer=0)
    with pytest.raises(ValueError):
        PipelineConfig(rtol=0.0)


def test_fixed_point_converges_with_mask_unchanged(small_channel, monkeypatch):
    mask, _ = small_channel
    ex, ey = mask.spec.extent
    kw = dict(in_shift=(ex / 2, ey / 2), in_scale=(2 / ex, 2 / ey))
    u_fixed = Mlp([2, 8, 2], seed=5, out_scale=3.0, **kw)
    p_fixed = Mlp([2, 8, 1], seed=6, **kw)
    noisy = rasterize(u_fixed, mask)
    calls = []

    def already_trained(noisy, segments, mask, config, u_net=None, p_net=None, optim=None, rng=None):
        calls.append(mask)
        return FluidResult(u_net, p_net, np.zeros((1, 5)), optim or (None, None))

    monkeypatch.setattr(pipeline, "init_networks", lambda *a: (u_fixed, p_fixed))
    monkeypatch.setattr(pipeline, "train_fluid", already_trained)
    u, m, state = run(noisy, mask, PipelineConfig(fluid=TINY, max_outer=8, geo_iterations=50))
    assert state.converged and state.n == 3
    assert state.misfit == [0.0, 0.0, 0.0]
    assert state.drift == [0.0, 0.0]
    assert np.array_equal(m.inside, mask.inside)
    assert np.array_equal(u.channels, noisy.channels)


def test_single_outer_iteration(small_channel):
    mask, gt = small_channel
    u, m, state = run(gt, mask, PipelineConfig(fluid=TINY, max_outer=1, geo_iterations=20))
    assert state.n == 1 and len(state.misfit) == 1 and len(state.drift) == 1
    assert len(state.masks) == 1 and m is state.masks[0]
    assert state.fluid.history.shape == (TINY.iterations, 5)


def test_run_is_deterministic_and_preserves_topology(small_channel):
    mask, gt = small_channel
    cfg = PipelineConfig(fluid=TINY, max_outer=3, geo_iterations=20)
    a = run(gt, mask, cfg)
    b = run(gt, mask, cfg)
    assert np.array_equal(a[0].channels, b[0].channels)
    assert np.array_equal(a[1].inside, b[1].inside)
    assert a[2].misfit == b[2].misfit and a[2].drift == b[2].drift
    assert all(mk.n_components == mask.n_components for mk in a[2].masks)
    assert len(a[2].misfit) == a[2].n


def test_disabled_geometry_keeps_mask(small_channel):
    mask, gt = small_channel
    _, m, state = run(gt, mask, PipelineConfig(fluid=TINY, max_outer=2, geo_iterations=0))
    assert m is mask and state.drift == [0.0, 0.0]


def test_artifacts_written(small_channel, tmp_path):
    mask, gt = small_channel
    run(gt, mask, PipelineConfig(fluid=TINY, max_outer=2, geo_iterations=5), out_dir=tmp_path)
    for n in (1, 2):
        assert (tmp_path / f"u_hat_{n:02d}.field").is_file()
        assert (tmp_path / f"mask_{n:02d}.png").is_file()
        assert (tmp_path / f"fluid_loss_{n:02d}.csv").is_file()
    rows = list(csv.reader(open(tmp_path / "history.csv")))
    assert rows[0] == ["iteration", "misfit", "drift", "sup_mu"] and len(rows) == 3


def test_collapsed_mask_aborts(small_channel):
    _, gt = small_channel
    inside = np.zeros(gt.spec.shape, bool)
    inside[10:14, 0:6] = True
    with pytest.raises(MaskCollapseError, match="iteration 0"):
        run(gt, DomainMask(gt.spec, inside), PipelineConfig(fluid=TINY, max_outer=1))


def test_grid_mismatch_rejected(small_channel):
    mask, _ = small_channel
    with pytest.raises(ValueError):
        run(VectorField2.zeros(GridSpec(8, 8, 1.0)), mask)
