import json

import numpy as np
import pytest
from PIL import Image

from flowrecon.grid import GridSpec, ScalarField, VectorField2
from flowrecon.io import (
    RED,
    YELLOW,
    ConfigError,
    FieldDtypeError,
    FieldFormatError,
    FieldTruncatedError,
    build_pipeline_config,
    default_run_config,
    export_png,
    load_config,
    read_field,
    read_mask,
    read_raw,
    read_vector,
    resolve_config,
    write_beltrami,
    write_field,
    write_loss_csv,
)
from flowrecon.mask import DomainMask, detect_edges
from flowrecon.qcmap import MappingField, beltrami

SPEC = GridSpec(7, 5, 0.3)


def rand_field(seed=0):
    rng = np.random.default_rng(seed)
    return VectorField2(SPEC, rng.normal(size=SPEC.shape), rng.normal(size=SPEC.shape))


def rect_mask(spec=GridSpec(12, 10, 1.0)):
    inside = np.zeros(spec.shape, bool)
    inside[2:8, 3:10] = True
    return DomainMask(spec, inside)


# -- field files -------------------------------------------------------------

def test_vector_round_trip_bit_exact(tmp_path):
    f = rand_field()
    write_field(tmp_path / "f.field", f, seed=42)
    g = read_vector(tmp_path / "f.field")
    assert g.spec == f.spec
    assert np.array_equal(g.u_x, f.u_x) and np.array_equal(g.u_y, f.u_y)
    head, _, _ = read_raw(tmp_path / "f.field")
    assert head["magic"] == "FLOWRECON-FIELD" and head["version"] == 1 and head["seed"] == 42
    assert head["channels"] == ["u_x", "u_y"] and head["dtype"] == "f64le"


def test_round_trip_extreme_values(tmp_path):
    vals = np.array([5e-324, -5e-324, 2.2e-308, 1.7976931348623157e308, -0.0, 1 / 3, np.pi, 0.1])
    raster = np.resize(vals, SPEC.shape)
    write_field(tmp_path / "s.field", ScalarField(SPEC, raster))
    back = read_field(tmp_path / "s.field")
    assert isinstance(back, ScalarField)
    assert back.values.tobytes() == raster.tobytes()


def test_payload_layout_channel_interleaved(tmp_path):
    spec = GridSpec(2, 1, 1.0)
    write_field(tmp_path / "f.field", VectorField2(spec, np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])))
    data = (tmp_path / "f.field").read_bytes()
    n = int.from_bytes(data[:8], "little")
    assert np.frombuffer(data[8 + n:], "<f8").tolist() == [1.0, 3.0, 2.0, 4.0]


def test_mask_and_mapping_round_trip(tmp_path):
    m = rect_mask()
    write_field(tmp_path / "m.field", m)
    assert np.array_equal(read_mask(tmp_path / "m.field").inside, m.inside)
    c = MappingField.identity(SPEC)
    write_field(tmp_path / "c.field", c)
    back = read_field(tmp_path / "c.field")
    assert isinstance(back, MappingField) and np.array_equal(back.target_x, c.target_x)
    write_beltrami(tmp_path / "mu.field", SPEC, beltrami(c))
    assert read_raw(tmp_path / "mu.field")[0]["channels"] == ["mu_re", "mu_im"]


def test_truncated_payload(tmp_path):
    write_field(tmp_path / "f.field", rand_field())
    data = (tmp_path / "f.field").read_bytes()
    (tmp_path / "t.field").write_bytes(data[:-8])
    with pytest.raises(FieldTruncatedError, match="payload"):
        read_field(tmp_path / "t.field")


def test_wrong_magic(tmp_path):
    write_field(tmp_path / "f.field", rand_field())
    data = (tmp_path / "f.field").read_bytes().replace(b"FLOWRECON-FIELD", b"FLOWRECON-FIELX")
    (tmp_path / "bad.field").write_bytes(data)
    with pytest.raises(FieldFormatError, match="magic"):
        read_field(tmp_path / "bad.field")


def test_wrong_dtype(tmp_path):
    write_field(tmp_path / "f.field", rand_field())
    data = (tmp_path / "f.field").read_bytes().replace(b'"f64le"', b'"f32le"')
    (tmp_path / "bad.field").write_bytes(data)
    with pytest.raises(FieldDtypeError):
        read_field(tmp_path / "bad.field")


def test_garbage_file(tmp_path):
    (tmp_path / "g.field").write_bytes(b"\x05\x00")
    with pytest.raises(FieldFormatError):
        read_field(tmp_path / "g.field")


def test_error_categories_are_distinct():
    cats = {FieldFormatError.category, FieldTruncatedError.category, FieldDtypeError.category}
    assert len(cats) == 3


def test_read_vector_rejects_mask(tmp_path):
    write_field(tmp_path / "m.field", rect_mask())
    with pytest.raises(FieldFormatError):
        read_vector(tmp_path / "m.field")


# -- PNG ---------------------------------------------------------------------

def test_constant_field_png_is_uniform(tmp_path):
    f = VectorField2(SPEC, np.full(SPEC.shape, 2.0), np.full(SPEC.shape, -1.0))
    export_png(f, tmp_path / "c.png")
    img = np.asarray(Image.open(tmp_path / "c.png"))
    assert img.shape == (5, 21) and np.unique(img).size == 1


def test_field_png_normalization(tmp_path):
    spec = GridSpec(2, 1, 1.0)
    export_png(ScalarField(spec, np.array([[1.0, 3.0]])), tmp_path / "s.png")
    assert np.asarray(Image.open(tmp_path / "s.png")).tolist() == [[0, 255]]


def test_mask_overlay_pixel_counts(tmp_path):
    pred = rect_mask()
    gt_inside = np.zeros(pred.spec.shape, bool)
    gt_inside[1:9, 1:6] = True
    gt = DomainMask(pred.spec, gt_inside)
    export_png(pred, tmp_path / "m.png", overlay=gt)
    img = np.asarray(Image.open(tmp_path / "m.png"))[::-1]
    red = np.all(img == RED, axis=2)
    yellow = np.all(img == YELLOW, axis=2)
    assert red.sum() == detect_edges(gt).sum()
    assert yellow.sum() == (detect_edges(pred) & ~detect_edges(gt)).sum()
    assert np.array_equal(red, detect_edges(gt))


def test_png_bytes_deterministic(tmp_path):
    f = rand_field(3)
    export_png(f, tmp_path / "a.png")
    export_png(f, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_png_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        export_png(rand_field(), tmp_path / "missing" / "x.png")


# -- CSV and configuration ---------------------------------------------------

def test_loss_csv(tmp_path):
    write_loss_csv(tmp_path / "l.csv", np.arange(10.0).reshape(2, 5))
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "step,data,ns,bdr,in,total"
    assert lines[2] == "1,5.0,6.0,7.0,8.0,9.0"


def test_default_config_matches_stated_parameters():
    cfg = default_run_config()
    assert cfg["fluid"]["nu"] == 0.035
    assert cfg["fluid"]["weights"] == {"alpha_data": 1.0, "alpha_ns": 1e-3, "alpha_bdr": 1.0, "alpha_in": 0.1}
    assert (cfg["geo"]["alpha_reg"], cfg["geo"]["alpha_bc"], cfg["geo"]["alpha_lap"]) == (1.0, 10.0, 1.0)
    pc = build_pipeline_config(cfg)
    assert pc.fluid.hidden == (20,) * 8 and pc.geo_iterations == 500


def test_config_overrides_and_unknown_keys(tmp_path):
    cfg = resolve_config({"fluid": {"iterations": 5, "lr_final": 1e-4}, "seed": 3})
    pc = build_pipeline_config(cfg)
    assert pc.fluid.iterations == 5 and pc.fluid.lr_final == 1e-4 and pc.fluid.seed == 3
    with pytest.raises(ConfigError, match="bogus"):
        resolve_config({"fluid": {"bogus": 1}})
    with pytest.raises(ConfigError):
        resolve_config({"fluid": {"nu": -1.0}})
    with pytest.raises(ConfigError):
        resolve_config({"fluid": 3})
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
    (tmp_path / "ok.json").write_text(json.dumps({"pipeline": {"max_outer": 2}}))
    assert load_config(tmp_path / "ok.json")["pipeline"]["max_outer"] == 2
