"""Command-line interface.

Every subcommand writes a ``run.json`` holding the subcommand, its resolved
arguments (inputs as absolute paths, the output location omitted) and
configuration, and the package version.  ``flowrecon rerun <run.json> --out
<path>`` repeats the run into a new location; its outputs, including the new
``run.json``, match the original byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from flowrecon import __version__

log = logging.getLogger("flowrecon")

EXIT_CODES = {
    "usage": 2,
    "file-not-found": 3,
    "format": 4,
    "truncated": 4,
    "dtype": 4,
    "config": 5,
    "numerical": 6,
    "boundary": 7,
    "io": 8,
    "internal": 1,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _limit_threads():
    n = os.environ.get("FLOWRECON_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise CliError("config", f"FLOWRECON_THREADS must be an integer, got {n!r}") from None
    if n < 1:
        raise CliError("config", "FLOWRECON_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _write_run_json(path: Path, command: str, args: dict, config: dict | None = None):
    doc = {"tool": "flowrecon", "version": __version__, "command": command, "args": args}
    if config is not None:
        doc["config"] = config
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _abs(path):
    return None if path is None else str(Path(path).resolve())


def _sidecar(out: Path) -> Path:
    return out.with_name(out.name + ".run.json")


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> dict:
    from flowrecon.io import export_png, load_config, synth_config, write_field
    from flowrecon.synth import make_geometry, solve_reference

    cfg = args.resolved_config if getattr(args, "resolved_config", None) else load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg["synth"]
    mask, geo = make_geometry(args.geometry, int(s["resolution"]), **s["params"])
    field, report = solve_reference(geo, synth_config(cfg), report=True)
    write_field(out / "gt.field", field, seed=cfg["seed"])
    write_field(out / "mask.field", mask, seed=cfg["seed"])
    export_png(mask, out / "mask.png")
    export_png(field, out / "gt.png")
    cfg["synth"]["params"] = {k: v for k, v in geo.params.items()}
    _write_run_json(out / "run.json", "synth", {"geometry": args.geometry}, cfg)
    log.info("synth: %s solved in %d steps", args.geometry, report.steps)
    return {"out": str(out)}


def cmd_noise(args) -> dict:
    from flowrecon.io import read_vector, write_field
    from flowrecon.synth import add_gaussian, add_signal_noise

    field = read_vector(args.inp)
    rng = np.random.default_rng(args.seed)
    if args.model == "gaussian":
        if args.sigma is None:
            raise CliError("usage", "--sigma is required for the gaussian model")
        noisy = add_gaussian(field, args.sigma, rng)
    else:
        noisy = add_signal_noise(field, rng, 3.0 if args.sigma is None else args.sigma)
    out = Path(args.out)
    write_field(out, noisy, seed=args.seed)
    _write_run_json(_sidecar(out), "noise", {"in": _abs(args.inp), "model": args.model, "sigma": args.sigma,
                                               "seed": args.seed})
    return {"out": str(out)}


def cmd_reconstruct(args) -> dict:
    from flowrecon.io import build_pipeline_config, export_png, load_config, read_mask, read_vector, write_field
    from flowrecon.pipeline import run

    cfg = args.resolved_config if getattr(args, "resolved_config", None) else load_config(args.config)
    noisy = read_vector(args.noisy)
    mask0 = read_mask(args.mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pc = build_pipeline_config(cfg)
    u_hat, mask, state = run(noisy, mask0, pc, out_dir=out / "iterations")
    write_field(out / "u_hat.field", u_hat, seed=cfg["seed"])
    write_field(out / "mask.field", mask, seed=cfg["seed"])
    export_png(u_hat, out / "u_hat.png")
    export_png(mask, out / "mask.png", overlay=mask0)
    (out / "iterations" / "history.csv").replace(out / "history.csv")
    (out / "u_net.bin").write_bytes(state.fluid.u_net.to_bytes())
    (out / "p_net.bin").write_bytes(state.fluid.p_net.to_bytes())
    _write_run_json(out / "run.json", "reconstruct",
                    {"noisy": _abs(args.noisy), "mask": _abs(args.mask)}, cfg)
    return {"out": str(out), "outer_iterations": state.n, "converged": state.converged}


def cmd_register(args) -> dict:
    """Fit one correction map registering ``--recon`` onto ``--noisy``."""
    from flowrecon.io import build_pipeline_config, load_config, read_vector, write_beltrami, write_field
    from flowrecon.pipeline import correction_drift
    from flowrecon.qcmap import beltrami, interior_sup_mu, train_geometry

    cfg = args.resolved_config if getattr(args, "resolved_config", None) else load_config(args.config)
    pc = build_pipeline_config(cfg)
    noisy, recon = read_vector(args.noisy), read_vector(args.recon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train_geometry(noisy, recon, pc.geo, pc.geo_iterations, pc.seed, pc.geo_lr)
    c = res.mapping
    write_field(out / "mapping.field", c, seed=cfg["seed"])
    write_beltrami(out / "beltrami.field", c.spec, beltrami(c))
    summary = {"drift": correction_drift(c), "sup_mu": interior_sup_mu(c),
               "mean_displacement": c.displacement().reshape(2, -1).mean(axis=1).tolist(),
               "final_loss": res.history[-1][0]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_run_json(out / "run.json", "register", {"noisy": _abs(args.noisy), "recon": _abs(args.recon)}, cfg)
    return {"out": str(out), **summary}


def cmd_eval(args) -> dict:
    from flowrecon.io import read_mask, read_vector
    from flowrecon.metrics import evaluate

    report = evaluate(read_vector(args.pred), read_vector(args.gt), read_mask(args.pred_mask),
                      read_mask(args.gt_mask))
    out = Path(args.out)
    out.write_text(report.to_json() + "\n")
    _write_run_json(_sidecar(out), "eval", {"pred": _abs(args.pred), "gt": _abs(args.gt),
                                            "pred_mask": _abs(args.pred_mask), "gt_mask": _abs(args.gt_mask)})
    return {"out": str(out)}


def cmd_export_png(args) -> dict:
    from flowrecon.io import export_png, read_field, read_mask

    field = read_field(args.inp)
    overlay = read_mask(args.overlay) if args.overlay else None
    if overlay is not None and not hasattr(field, "inside"):
        raise CliError("usage", "--overlay applies to mask inputs only")
    out = Path(args.out)
    export_png(field, out, overlay)
    _write_run_json(_sidecar(out), "export-png", {"in": _abs(args.inp), "overlay": _abs(args.overlay)})
    return {"out": str(out)}


def cmd_rerun(args) -> dict:
    """Repeat a recorded run, writing outputs to ``--out``."""
    try:
        doc = json.loads(Path(args.run).read_text())
    except json.JSONDecodeError as exc:
        raise CliError("format", f"{args.run}: invalid run.json ({exc})") from exc
    command = doc.get("command")
    if command not in HANDLERS or command == "rerun":
        raise CliError("format", f"{args.run}: unknown recorded command {command!r}")
    rec = dict(doc["args"])
    rec["out"] = args.out
    ns = argparse.Namespace(**{k.replace("-", "_"): v for k, v in rec.items()})
    if "in" in rec:
        ns.inp = rec["in"]
    ns.config = None
    ns.resolved_config = doc.get("config")
    if ns.resolved_config is not None:
        from flowrecon.io import resolve_config

        ns.resolved_config = resolve_config(ns.resolved_config)
    return HANDLERS[command](ns)


HANDLERS = {
    "synth": cmd_synth,
    "noise": cmd_noise,
    "reconstruct": cmd_reconstruct,
    "register": cmd_register,
    "eval": cmd_eval,
    "export-png": cmd_export_png,
    "rerun": cmd_rerun,
}


def build_parser() -> argparse.ArgumentParser:
    from flowrecon.synth import KINDS

    p = _Parser(prog="flowrecon", description="Flow image reconstruction with domain correction.")
    p.add_argument("--version", action="version", version=f"flowrecon {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="solve a preset geometry for a ground-truth field and mask")
    s.add_argument("--geometry", required=True, choices=KINDS)
    s.add_argument("--config")
    s.add_argument("--out", required=True)

    s = sub.add_parser("noise", help="corrupt a field with Gaussian or signal-dependent noise")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--model", required=True, choices=("gaussian", "signal"))
    s.add_argument("--sigma", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("reconstruct", help="run the alternating reconstruction")
    s.add_argument("--noisy", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)

    s = sub.add_parser("register", help="fit a correction map registering a reconstruction onto a measurement")
    s.add_argument("--noisy", required=True)
    s.add_argument("--recon", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="compare a reconstruction with the ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--pred-mask", required=True)
    s.add_argument("--gt-mask", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("export-png", help="render a field or mask file as PNG")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--overlay")

    s = sub.add_parser("rerun", help="repeat a run recorded in run.json")
    s.add_argument("run")
    s.add_argument("--out", required=True)
    return p


def _categorize(exc: BaseException) -> str:
    from flowrecon.autodiff import NonFiniteLossError
    from flowrecon.mask import BoundaryClassificationError
    from flowrecon.pipeline import MaskCollapseError
    from flowrecon.synth import SolverDivergedError

    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, FileNotFoundError):
        return "file-not-found"
    cat = getattr(exc, "category", None)
    if isinstance(cat, str):
        return cat
    if isinstance(exc, BoundaryClassificationError):
        return "boundary"
    if isinstance(exc, (NonFiniteLossError, SolverDivergedError, MaskCollapseError)):
        return "numerical"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ValueError):
        return "config"
    return "internal"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        limiter = _limit_threads()
        try:
            result = HANDLERS[args.command](args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit category
        cat = _categorize(exc)
        sys.stderr.write(json.dumps({"error": cat, "message": str(exc)}) + "\n")
        return EXIT_CODES.get(cat, 1)
    sys.stdout.write(json.dumps(result) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
