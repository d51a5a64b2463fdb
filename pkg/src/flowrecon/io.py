"""Field files, PNG export, loss-history CSV, and run configuration."""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
from PIL import Image

from flowrecon.fluid import FluidConfig, FluidWeights
from flowrecon.grid import GridSpec, ScalarField, VectorField2
from flowrecon.mask import DomainMask, detect_edges
from flowrecon.pipeline import PipelineConfig
from flowrecon.qcmap import BeltramiField, GeoWeights, MappingField
from flowrecon.synth import SynthConfig

MAGIC = "FLOWRECON-FIELD"
VERSION = 1
DTYPE = "f64le"


class FieldFileError(ValueError):
    category = "format"


class FieldFormatError(FieldFileError):
    """Bad magic, unreadable header, or inconsistent header fields."""


class FieldTruncatedError(FieldFileError):
    category = "truncated"


class FieldDtypeError(FieldFileError):
    category = "dtype"


class ConfigError(ValueError):
    category = "config"


# -- field files -------------------------------------------------------------

def write_raw(path, spec: GridSpec, channels: np.ndarray, names, seed=None, extra=None):
    """Write ``channels`` (C, K, H) as a field file."""
    channels = np.asarray(channels, dtype=np.float64)
    if channels.shape != (len(names),) + spec.shape:
        raise ValueError(f"channel array {channels.shape} does not match {len(names)} x {spec.shape}")
    head = {"magic": MAGIC, "version": VERSION, "H": spec.H, "K": spec.K, "eps_cm": spec.eps,
            "channels": list(names), "dtype": DTYPE, "seed": seed}
    if extra:
        head.update(extra)
    hb = json.dumps(head, sort_keys=True).encode()
    payload = np.ascontiguousarray(np.moveaxis(channels, 0, -1)).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(len(hb).to_bytes(8, "little"))
        fh.write(hb)
        fh.write(payload)


def read_raw(path):
    """Return ``(header, spec, channels (C, K, H))``."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FieldFormatError(f"{path}: file too short for a field header")
    n = int.from_bytes(data[:8], "little")
    if n > len(data) - 8:
        raise FieldFormatError(f"{path}: declared header length {n} exceeds file size")
    try:
        head = json.loads(data[8:8 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"{path}: header is not valid JSON") from exc
    if not isinstance(head, dict) or head.get("magic") != MAGIC:
        raise FieldFormatError(f"{path}: magic mismatch, not a {MAGIC} file")
    if head.get("dtype") != DTYPE:
        raise FieldDtypeError(f"{path}: unsupported dtype {head.get('dtype')!r}, expected {DTYPE!r}")
    try:
        spec = GridSpec(int(head["H"]), int(head["K"]), float(head["eps_cm"]))
        names = list(head["channels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FieldFormatError(f"{path}: malformed header ({exc})") from exc
    expected = spec.H * spec.K * len(names) * 8
    payload = data[8 + n:]
    if len(payload) != expected:
        raise FieldTruncatedError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(spec.K, spec.H, len(names))
    return head, spec, np.moveaxis(arr, -1, 0).copy()


def write_field(path, field, seed=None):
    if isinstance(field, VectorField2):
        write_raw(path, field.spec, field.channels, ["u_x", "u_y"], seed)
    elif isinstance(field, ScalarField):
        write_raw(path, field.spec, field.values[None], ["value"], seed)
    elif isinstance(field, DomainMask):
        write_raw(path, field.spec, field.as_float()[None], ["mask"], seed)
    elif isinstance(field, MappingField):
        write_raw(path, field.spec, np.stack([field.target_x, field.target_y]), ["target_x", "target_y"], seed)
    else:
        raise TypeError(f"cannot write {type(field).__name__}")


def write_beltrami(path, spec: GridSpec, mu: BeltramiField):
    write_raw(path, spec, np.stack([mu.mu_re, mu.mu_im]), ["mu_re", "mu_im"])


def read_field(path):
    """Read a field file as a VectorField2, ScalarField, DomainMask or MappingField."""
    head, spec, ch = read_raw(path)
    names = head["channels"]
    if names == ["u_x", "u_y"]:
        return VectorField2(spec, ch[0], ch[1])
    if names == ["mask"]:
        return DomainMask(spec, ch[0] >= 0.5)
    if names == ["target_x", "target_y"]:
        return MappingField(spec, ch[0], ch[1])
    if len(names) == 1:
        return ScalarField(spec, ch[0])
    if len(names) == 2:
        return VectorField2(spec, ch[0], ch[1])
    raise FieldFormatError(f"{path}: unsupported channel layout {names}")


def read_vector(path) -> VectorField2:
    f = read_field(path)
    if not isinstance(f, VectorField2):
        raise FieldFormatError(f"{path}: expected a two-channel velocity field")
    return f


def read_mask(path) -> DomainMask:
    f = read_field(path)
    if isinstance(f, DomainMask):
        return f
    if isinstance(f, ScalarField):
        return DomainMask(f.spec, f.values >= 0.5)
    raise FieldFormatError(f"{path}: expected a single-channel mask")


# -- PNG ---------------------------------------------------------------------

RED = (255, 0, 0)
YELLOW = (255, 255, 0)


def _to_u8(img: np.ndarray) -> np.ndarray:
    """Min/max normalize to 0..255; a constant image maps to 0."""
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _flip(raster):
    # raster row k grows with y; image rows grow downward
    return raster[::-1]


def export_png(field, path, overlay: DomainMask | None = None):
    """Write an 8-bit PNG.

    Velocity fields are tiled left to right as u_x, u_y and speed, each
    normalized by its own min and max.  Scalar fields are a single normalized
    panel.  Masks are white on black; the mask's own edge pixels are drawn
    yellow and, if ``overlay`` is given, that mask's edges red on top.
    """
    if isinstance(field, DomainMask):
        rgb = np.repeat((field.inside * 255).astype(np.uint8)[..., None], 3, axis=2)
        rgb[detect_edges(field)] = YELLOW
        if overlay is not None:
            if overlay.spec != field.spec:
                raise ValueError("overlay mask lives on a different grid")
            rgb[detect_edges(overlay)] = RED
        img = Image.fromarray(np.ascontiguousarray(_flip(rgb)), mode="RGB")
    else:
        ch = field.channels
        if not np.all(np.isfinite(ch)):
            raise ValueError("cannot render non-finite values")
        panels = [_to_u8(c) for c in ch]
        if isinstance(field, VectorField2):
            panels.append(_to_u8(field.speed()))
        img = Image.fromarray(np.ascontiguousarray(_flip(np.hstack(panels))), mode="L")
    try:
        img.save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise OSError(f"cannot write PNG to {path}: {exc}") from exc


def export_mask_png(mask: DomainMask, path, overlay: DomainMask | None = None):
    export_png(mask, path, overlay)


# -- CSV ---------------------------------------------------------------------

def write_loss_csv(path, history: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "data", "ns", "bdr", "in", "total"])
        for i, row in enumerate(np.asarray(history)):
            w.writerow([i] + [repr(float(v)) for v in row])


# -- run configuration -------------------------------------------------------

DEFAULT_SYNTH = {"v": 5.0, "nu": 0.035, "resolution": 128, "refine": 1, "tol": 1e-8,
                 "max_steps": 200000, "cfl": 0.4, "params": {}}


def default_run_config() -> dict:
    fc = FluidConfig()
    gw = GeoWeights()
    pc = PipelineConfig()
    return {
        "seed": 0,
        "fluid": {
            "nu": fc.nu, "iterations": fc.iterations, "n_interior": fc.n_interior,
            "n_inlet": fc.n_inlet, "n_outlet": fc.n_outlet, "n_wall": fc.n_wall,
            "lr": fc.lr, "lr_final": fc.lr_final, "hidden": list(fc.hidden),
            "weights": dataclasses.asdict(fc.weights),
        },
        "geo": {**dataclasses.asdict(gw), "iterations": pc.geo_iterations, "lr": pc.geo_lr},
        "pipeline": {"max_outer": pc.max_outer, "window": pc.window, "rtol": pc.rtol},
        "synth": json.loads(json.dumps(DEFAULT_SYNTH)),
    }


def _merge(base: dict, override: dict, where: str):
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key != "params":
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            _merge(base[key], val, f"{where}{key}.")
        else:
            base[key] = val


def resolve_config(doc: dict | None) -> dict:
    """Defaults overlaid by ``doc``; unknown keys are rejected."""
    cfg = default_run_config()
    if doc:
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _merge(cfg, doc, "")
    build_pipeline_config(cfg)
    synth_config(cfg)
    return cfg


def load_config(path) -> dict:
    if path is None:
        return resolve_config(None)
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return resolve_config(doc)


def build_pipeline_config(cfg: dict) -> PipelineConfig:
    try:
        f = cfg["fluid"]
        fluid = FluidConfig(
            nu=float(f["nu"]), iterations=int(f["iterations"]), n_interior=int(f["n_interior"]),
            n_inlet=int(f["n_inlet"]), n_outlet=int(f["n_outlet"]), n_wall=int(f["n_wall"]),
            weights=FluidWeights(**{k: float(v) for k, v in f["weights"].items()}),
            seed=int(cfg["seed"]), lr=float(f["lr"]),
            lr_final=None if f["lr_final"] is None else float(f["lr_final"]),
            hidden=tuple(int(h) for h in f["hidden"]),
        )
        g = cfg["geo"]
        p = cfg["pipeline"]
        return PipelineConfig(
            fluid=fluid,
            geo=GeoWeights(float(g["alpha_reg"]), float(g["alpha_bc"]), float(g["alpha_lap"])),
            geo_iterations=int(g["iterations"]), geo_lr=None if g["lr"] is None else float(g["lr"]),
            max_outer=int(p["max_outer"]), window=int(p["window"]), rtol=float(p["rtol"]),
            seed=int(cfg["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def synth_config(cfg: dict) -> SynthConfig:
    s = cfg["synth"]
    try:
        if int(s["resolution"]) < 2:
            raise ValueError("resolution must be >= 2")
        if not isinstance(s["params"], dict):
            raise ValueError("synth.params must be an object")
        return SynthConfig(v=float(s["v"]), nu=float(s["nu"]), refine=int(s["refine"]), tol=float(s["tol"]),
                           max_steps=int(s["max_steps"]), cfl=float(s["cfl"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth configuration: {exc}") from exc
