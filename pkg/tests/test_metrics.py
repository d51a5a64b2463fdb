import json
import math

import numpy as np
import pytest

from flowrecon.grid import GridSpec, VectorField2
from flowrecon.mask import DomainMask, EmptyMaskError, interior
from flowrecon.metrics import EvalReport, dice, evaluate, hd95, mask_mse, mse, psnr, relative_error, ssim
from oracles import hd95_bruteforce, ssim_loop

SPEC = GridSpec(16, 16, 1.0)


def rand_field(seed, spec=SPEC):
    rng = np.random.default_rng(seed)
    return VectorField2(spec, rng.normal(size=spec.shape), rng.normal(size=spec.shape))


def scaled(f, s, shift=0.0):
    return VectorField2(f.spec, s * f.u_x + shift, s * f.u_y + shift)


def square_mask(h0, k0, n=10, size=24):
    inside = np.zeros((size, size), bool)
    inside[k0:k0 + n, h0:h0 + n] = True
    return DomainMask(GridSpec(size, size, 1.0), inside)


FULL = np.ones(SPEC.shape, bool)


# -- relative error ----------------------------------------------------------

def test_re_identical_zero_and_scaled():
    f = rand_field(0)
    assert relative_error(f, f, FULL) == 0.0
    assert relative_error(VectorField2.zeros(SPEC), f, FULL) == 1.0
    assert relative_error(scaled(f, 1.1), f, FULL) == pytest.approx(0.01, rel=1e-12)


def test_re_scale_invariant():
    a, b = rand_field(1), rand_field(2)
    assert relative_error(scaled(a, 7.5), scaled(b, 7.5), FULL) == pytest.approx(relative_error(a, b, FULL), rel=1e-12)


def test_re_restricted_to_gt_mask():
    a, b = rand_field(1), rand_field(2)
    m = np.zeros(SPEC.shape, bool)
    m[4:10, 3:12] = True
    outside = VectorField2(SPEC, np.where(m, a.u_x, 99.0), np.where(m, a.u_y, -99.0))
    assert relative_error(outside, b, m) == relative_error(a, b, m)


def test_re_zero_energy_is_error():
    with pytest.raises(ValueError):
        relative_error(rand_field(0), VectorField2.zeros(SPEC), FULL)


# -- MSE / PSNR --------------------------------------------------------------

def test_mse_cases():
    f = rand_field(3)
    assert mse(f, f) == 0.0
    assert mse(scaled(f, 1.0, 2.0), f) == pytest.approx(4.0, rel=1e-14)
    g = rand_field(4)
    total = sum((f.channels[c, k, h] - g.channels[c, k, h]) ** 2
                for c in range(2) for k in range(16) for h in range(16))
    assert mse(f, g) == pytest.approx(total / (2 * 256), rel=1e-13)


def test_psnr_identical_is_infinite():
    f = rand_field(5)
    assert psnr(f, f) == math.inf


def test_psnr_value():
    f = rand_field(6)
    peak = np.max(np.abs(f.channels))
    assert psnr(scaled(f, 1.0, 0.5), f) == pytest.approx(10 * np.log10(peak**2 / 0.25), rel=1e-13)


def test_psnr_decreases_with_noise_variance():
    gt = scaled(rand_field(7), 5.0)
    rng = np.random.default_rng(8)
    vals = []
    for sigma in (0.1, 0.5, 2.0):
        n = rng.normal(0, sigma, size=(2,) + SPEC.shape)
        vals.append(psnr(VectorField2(SPEC, gt.u_x + n[0], gt.u_y + n[1]), gt))
    assert vals[0] > vals[1] > vals[2]


# -- SSIM --------------------------------------------------------------------

def test_ssim_identical():
    f = rand_field(9)
    assert ssim(f, f) == pytest.approx(1.0, abs=1e-12)


def test_ssim_anticorrelated_ramps():
    X, _ = SPEC.centers()
    up = VectorField2(SPEC, X, np.zeros(SPEC.shape))
    down = VectorField2(SPEC, 16.0 - X, np.zeros(SPEC.shape))
    val = ssim(down, up)
    assert val < 0
    assert val == pytest.approx(ssim_loop(down.speed(), up.speed(), 15.0), abs=1e-12)


@pytest.mark.parametrize("s,shift", [(1.0, 0.0), (0.5, 0.0), (1.0, 2.0), (2.0, -0.3)])
def test_ssim_matches_loop_oracle(s, shift):
    gt = rand_field(10)
    pred = rand_field(11)
    pred = VectorField2(SPEC, s * gt.u_x + 0.3 * pred.u_x + shift, s * gt.u_y + 0.3 * pred.u_y)
    L = float(gt.speed().max() - gt.speed().min())
    assert ssim(pred, gt) == pytest.approx(ssim_loop(pred.speed(), gt.speed(), L), abs=1e-12)


def test_ssim_constant_images_finite():
    c = VectorField2(SPEC, np.ones(SPEC.shape), np.zeros(SPEC.shape))
    assert ssim(c, c) == 1.0


# -- segmentation ------------------------------------------------------------

def test_dice_and_hd95_identical():
    m = square_mask(5, 5)
    assert dice(m, m) == 1.0 and hd95(m, m) == 0.0


def test_dice_disjoint():
    assert dice(square_mask(0, 0, 5), square_mask(12, 12, 5)) == 0.0


def test_shifted_square():
    a, b = square_mask(5, 5), square_mask(7, 5)
    assert dice(a, b) == pytest.approx(0.8, rel=1e-15)
    assert hd95(a, b) == 2.0
    assert hd95(a, b) == hd95_bruteforce(a.inside & ~interior(a), b.inside & ~interior(b))


def test_hd95_random_masks_match_bruteforce():
    rng = np.random.default_rng(12)
    for _ in range(3):
        a = DomainMask(GridSpec(20, 20, 1.0), rng.random((20, 20)) < 0.5)
        b = DomainMask(GridSpec(20, 20, 1.0), rng.random((20, 20)) < 0.5)
        ea, eb = a.inside & ~interior(a), b.inside & ~interior(b)
        assert hd95(a, b) == pytest.approx(hd95_bruteforce(ea, eb), abs=1e-12)


def test_segmentation_symmetry_and_translation_invariance():
    a, b = square_mask(3, 4, 8), square_mask(6, 5, 9)
    assert dice(a, b) == dice(b, a) and hd95(a, b) == hd95(b, a)
    a2, b2 = square_mask(8, 9, 8), square_mask(11, 10, 9)
    assert dice(a2, b2) == dice(a, b) and hd95(a2, b2) == hd95(a, b)


def test_hd95_empty_mask_is_error():
    empty = DomainMask(GridSpec(24, 24, 1.0), np.zeros((24, 24), bool))
    with pytest.raises(EmptyMaskError):
        hd95(empty, square_mask(2, 2))


def test_mask_mse():
    a, b = square_mask(5, 5), square_mask(7, 5)
    assert mask_mse(a, b) == pytest.approx(40 / 576, rel=1e-15)


# -- report ------------------------------------------------------------------

def test_evaluate_identical_and_serialization():
    spec = GridSpec(24, 24, 1.0)
    f = rand_field(13, spec)
    m = square_mask(5, 5)
    rep = evaluate(f, f, m, m)
    assert rep.re == 0.0 and rep.mse == 0.0 and rep.dice == 1.0 and rep.hd95 == 0.0
    doc = json.loads(rep.to_json())
    assert doc["psnr"] is None and doc["psnr_infinite"] is True
    lines = rep.csv_row().splitlines()
    assert lines[0].split(",")[:3] == ["re", "mse", "psnr"] and len(lines) == 2
    assert len(rep.csv_row(header=False).splitlines()) == 1


def test_report_finite_psnr_json():
    rep = EvalReport(0.1, 0.2, 30.0, 0.9, 0.01, 0.95, 2.0)
    doc = json.loads(rep.to_json())
    assert doc["psnr"] == 30.0 and doc["psnr_infinite"] is False
