import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowrecon.grid import (
    GridSpec,
    ScalarField,
    VectorField2,
    discrete_l2,
    pixel_coords,
    sample_bilinear,
)
from oracles import bilinear_textbook


def test_pixel_coords_single_pixel():
    assert np.array_equal(pixel_coords(GridSpec(1, 1, 1.0)), [[0.5, 0.5]])


def test_pixel_coords_two_by_one():
    assert np.array_equal(pixel_coords(GridSpec(2, 1, 2.0)), [[1.0, 1.0], [3.0, 1.0]])


def test_pixel_coords_converging_extent_first_point():
    pts = pixel_coords(GridSpec(256, 256, 40 / 256))
    assert len(pts) == 256 * 256
    assert np.allclose(pts[0], [0.078125, 0.078125], atol=0, rtol=0)


def test_pixel_coords_row_major_x_fastest():
    spec = GridSpec(3, 2, 1.0)
    pts = pixel_coords(spec)
    assert np.array_equal(pts[:3, 1], [0.5, 0.5, 0.5])
    assert np.array_equal(pts[:3, 0], [0.5, 1.5, 2.5])


def test_pixel_coords_inverse_recovers_indices():
    spec = GridSpec(7, 5, 0.3)
    pts = pixel_coords(spec)
    hk = [spec.index_of(p) for p in pts]
    expected = [(h, k) for k in range(5) for h in range(7)]
    assert hk == expected


def test_gridspec_rejects_bad_pitch():
    with pytest.raises(ValueError):
        GridSpec(4, 4, 0.0)
    with pytest.raises(ValueError):
        GridSpec(0, 4, 1.0)


def test_fields_reject_nonfinite():
    spec = GridSpec(2, 2, 1.0)
    bad = np.array([[0.0, np.nan], [0.0, 0.0]])
    with pytest.raises(ValueError):
        ScalarField(spec, bad)
    with pytest.raises(ValueError):
        VectorField2(spec, np.zeros((2, 2)), bad)


def test_fields_are_immutable():
    f = VectorField2.zeros(GridSpec(2, 2, 1.0))
    with pytest.raises(ValueError):
        f.u_x[0, 0] = 1.0


def test_bilinear_exact_at_centers():
    rng = np.random.default_rng(0)
    spec = GridSpec(6, 5, 0.5)
    f = ScalarField(spec, rng.normal(size=spec.shape))
    X, Y = spec.centers()
    for k in range(5):
        for h in range(6):
            assert sample_bilinear(f, (X[k, h], Y[k, h])) == f.values[k, h]


def test_bilinear_midpoint():
    spec = GridSpec(2, 1, 1.0)
    f = ScalarField(spec, np.array([[0.0, 1.0]]))
    assert sample_bilinear(f, (1.0, 0.5)) == pytest.approx(0.5, abs=1e-15)


def test_bilinear_matches_textbook_oracle():
    rng = np.random.default_rng(1)
    spec = GridSpec(8, 8, 1.0)
    vals = rng.normal(size=spec.shape)
    f = ScalarField(spec, vals)
    pts = rng.uniform(0, 8, size=(100, 2))
    got = sample_bilinear(f, pts)
    ref = [bilinear_textbook(vals, 1.0, x, y) for x, y in pts]
    assert np.max(np.abs(got - ref)) < 1e-12


def test_bilinear_vector_field_batch_shape():
    spec = GridSpec(4, 4, 1.0)
    f = VectorField2(spec, np.ones(spec.shape), 2 * np.ones(spec.shape))
    assert sample_bilinear(f, [[1.0, 1.0], [2.0, 2.0]]).shape == (2, 2)
    assert np.allclose(sample_bilinear(f, (1.3, 2.2)), [1.0, 2.0])


def test_bilinear_rejects_nonfinite_point():
    f = ScalarField(GridSpec(3, 3, 1.0), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        sample_bilinear(f, (np.nan, 1.0))


def test_bilinear_clamps_outside_lattice():
    spec = GridSpec(3, 3, 1.0)
    vals = np.arange(9.0).reshape(3, 3)
    f = ScalarField(spec, vals)
    assert sample_bilinear(f, (0.1, 0.1)) == vals[0, 0]
    assert sample_bilinear(f, (2.9, 2.9)) == vals[2, 2]


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5),
       x=st.floats(0.5, 7.5), y=st.floats(0.5, 5.5))
def test_bilinear_reproduces_affine_fields(a, b, c, x, y):
    spec = GridSpec(8, 6, 1.0)
    X, Y = spec.centers()
    f = ScalarField(spec, a * X + b * Y + c)
    assert sample_bilinear(f, (x, y)) == pytest.approx(a * x + b * y + c, abs=1e-12)


def test_discrete_l2_examples():
    assert discrete_l2([(0.0, 0.0)]) == 0.0
    assert discrete_l2([(3.0, 4.0)]) == 5.0
    # squared norms 1, 1, 2, 0 average to exactly 1
    assert discrete_l2([(1, 0), (0, 1), (1, 1), (0, 0)]) == 1.0
    assert discrete_l2([(1, 0), (0, 1), (0, 1), (0, 0)]) == pytest.approx(np.sqrt(3 / 4), rel=1e-15)


def test_discrete_l2_empty_is_error():
    with pytest.raises(ValueError):
        discrete_l2([])


@settings(max_examples=50, deadline=None)
@given(s=st.one_of(st.just(0.0), st.floats(1e-100, 1e100), st.floats(-1e100, -1e-100)),
       seed=st.integers(0, 1000))
def test_discrete_l2_homogeneous(s, seed):
    samples = np.random.default_rng(seed).normal(size=(17, 2))
    base = discrete_l2(samples)
    assert discrete_l2(s * samples) == pytest.approx(abs(s) * base, rel=1e-12)
