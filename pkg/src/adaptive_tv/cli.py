"""Command-line front end: ``adaptive-tv {denoise,train,subdivide,metrics,noise}``.

Exit codes: 0 success, 1 usage/configuration error, 2 data error (missing
or unreadable file, mismatched shapes), 3 solver warnings when ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics
from .bilevel import TrainingPair, optimize_lambda
from .image_io import ImageFormatError, add_gaussian_noise, load_image, save_image
from .partition import BoxConstraint, ConfigurationError, DomainError
from .primal_dual import ConvergenceWarning
from .scheme import (
    MODES,
    SchemeConfig,
    image_metrics,
    report_dict,
    run_scheme,
    scheme_config_from_dict,
    stopping_report,
    weighted_denoise,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_WARN = 0, 1, 2, 3

log = logging.getLogger("adaptive_tv")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad arguments; usage errors are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read(path) -> np.ndarray:
    try:
        return load_image(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file")
    except (ImageFormatError, OSError) as exc:
        raise DataError(f"{path}: {exc}")


def _pair(args) -> TrainingPair:
    clean, noisy = _read(args.clean), _read(args.noisy)
    if clean.shape != noisy.shape:
        raise DataError(f"clean {clean.shape} and noisy {noisy.shape} images differ in shape")
    return TrainingPair(clean, noisy)


def _load_config(args) -> SchemeConfig:
    data: dict = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DataError(f"{args.config}: no such file")
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})")
    cfg = scheme_config_from_dict(data)
    flat = {}
    for key, attr in (("rho", "rho"), ("delta", "delta"), ("l_max", "lmax"), ("mode", "reg"),
                      ("alpha0", "alpha0"), ("alpha1", "alpha1"), ("mollify_k", "mollify_k")):
        val = getattr(args, attr, None)
        if val is not None:
            flat[key] = val
    if getattr(args, "c0", None) is not None:
        flat["box"] = BoxConstraint(c0=args.c0)
    solver = {k: getattr(args, k) for k in ("tol", "max_iter", "backend") if getattr(args, k, None) is not None}
    bilevel = {k: v for k, v in (("tol", getattr(args, "outer_tol", None)),
                                 ("max_outer", getattr(args, "max_outer", None)),
                                 ("lambda0", getattr(args, "lambda0", None))) if v is not None}
    try:
        cfg = replace(cfg, **flat)
        if solver:
            cfg = replace(cfg, solver=replace(cfg.solver, **solver))
            cfg.solver.validate()
        if bilevel:
            cfg = replace(cfg, bilevel=replace(cfg.bilevel, **bilevel))
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc))
    return cfg


def _threads() -> None:
    """Honour ``ADAPTIVE_TV_THREADS`` as a cap on numba's thread pool."""
    raw = os.environ.get("ADAPTIVE_TV_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"ADAPTIVE_TV_THREADS must be a positive integer, got {raw!r}")
    try:
        import numba
    except ImportError:
        return
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _save_weight(weight: np.ndarray, out: Path, mode: str) -> dict:
    """Write the weight map rescaled to [0, 1] and a sidecar with the true range."""
    lo, hi = float(weight.min()), float(weight.max())
    scaled = np.zeros_like(weight) if hi == lo else (weight - lo) / (hi - lo)
    save_image(scaled, out / "weight.pgm")
    side = {"min": lo, "max": hi, "mode": mode, "scaling": "pixel = round(255 (w - min) / (max - min))"}
    _write_json(out / "weight.json", side)
    return side


# -- subcommands ---------------------------------------------------------------


def cmd_metrics(args) -> list[str]:
    a, b = _read(args.image), _read(args.reference)
    if a.shape != b.shape:
        raise DataError(f"images differ in shape: {a.shape} vs {b.shape}")
    print(json.dumps(image_metrics(a, b), sort_keys=True))
    return []


def cmd_noise(args) -> list[str]:
    u = _read(args.input)
    mask = None
    if args.mask:
        mask = _read(args.mask)
        if mask.shape != u.shape:
            raise DataError(f"mask {mask.shape} and image {u.shape} differ in shape")
    if args.sigma < 0:
        raise UsageError("--sigma must be non-negative")
    noisy = add_gaussian_noise(u, args.sigma, args.seed, mask)
    save_image(noisy, args.output)
    print(json.dumps({"sigma": args.sigma, "seed": args.seed, "mask": args.mask, "output": str(args.output)}))
    return []


def cmd_denoise(args) -> list[str]:
    noisy = _read(args.noisy)
    cfg = _load_config(args)
    if args.weight:
        if args.weight_range is None:
            raise UsageError("--weight needs --weight-range MIN MAX to undo the 8-bit scaling")
        w8 = _read(args.weight)
        if w8.shape != noisy.shape:
            raise DataError(f"weight {w8.shape} and image {noisy.shape} differ in shape")
        lo, hi = args.weight_range
        weight = lo + (hi - lo) * w8
    else:
        weight = np.full(noisy.shape, args.lam)
    if np.any(weight <= 0):
        raise UsageError("weights must be positive")
    final_cfg = cfg.final_solver or replace(cfg.solver, tol=min(cfg.solver.tol, 1e-6))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        res = weighted_denoise(noisy, weight, cfg.mode, final_cfg, cfg.alpha0, cfg.alpha1, cfg.mollify_k)
    warn = [str(w.message) for w in caught]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_image(res.u, out / "restored.pgm")
    doc = {"mode": cfg.mode, "iterations": res.iterations, "converged": res.converged, "warnings": warn}
    if args.clean:
        clean = _read(args.clean)
        if clean.shape != noisy.shape:
            raise DataError("clean and noisy images differ in shape")
        doc["metrics"] = image_metrics(res.u, clean)
    _write_json(out / "report.json", doc)
    print(json.dumps(doc.get("metrics", {}), sort_keys=True))
    return warn


def _region(spec: str | None, shape) -> tuple[slice, slice]:
    if spec is None:
        return slice(0, shape[0]), slice(0, shape[1])
    try:
        rows, cols = spec.split(",")
        r0, r1 = (int(v) for v in rows.split(":"))
        c0, c1 = (int(v) for v in cols.split(":"))
    except ValueError:
        raise UsageError(f"--region must look like r0:r1,c0:c1, got {spec!r}")
    if not (0 <= r0 < r1 <= shape[0] and 0 <= c0 < c1 <= shape[1]):
        raise UsageError(f"--region {spec} outside image of shape {shape}")
    return slice(r0, r1), slice(c0, c1)


def cmd_train(args) -> list[str]:
    pair = _pair(args)
    cfg = _load_config(args)
    if cfg.mode not in ("tv-fid", "tgv-fid"):
        raise UsageError("train learns a fidelity weight; use --reg tv-fid or tgv-fid")
    rows, cols = _region(args.region, pair.clean.shape)
    bcfg = replace(cfg.bilevel, box=cfg.box)
    res = optimize_lambda(pair.crop(rows, cols), cfg.regularizer, bcfg, cfg.solver, verbose=args.verbose)
    doc = {
        "region": [rows.start, rows.stop, cols.start, cols.stop],
        "lambda": res.lambda_star,
        "cost": res.cost,
        "converged": bool(res.converged),
        "outer_iterations": len(res.trace) - 1,
        "warnings": res.warnings,
    }
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "report.json", {**doc, "trace": res.trace})
    print(json.dumps(doc, sort_keys=True))
    return list(res.warnings)


def cmd_subdivide(args) -> list[str]:
    pair = _pair(args)
    cfg = _load_config(args)
    try:
        cfg.check_dims(pair.clean.shape)
    except ConfigurationError as exc:
        raise UsageError(str(exc))
    result = run_scheme(pair, cfg)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result.restored, out / "restored.pgm")
    side = _save_weight(result.weight, out, cfg.mode)
    extra = {"stopping": stopping_report(result), "weight": side}
    _write_json(out / "report.json", report_dict(result, extra))
    summary = {"metrics": result.metrics, "n_cells": len(result.partition)}
    if result.baseline is not None:
        summary["baseline"] = result.baseline["metrics"]
    print(json.dumps(summary, sort_keys=True))
    return list(result.warnings)


# -- parser --------------------------------------------------------------------


def _scheme_flags(p: argparse.ArgumentParser, lam_flags: bool = False) -> None:
    p.add_argument("--config", help="JSON file with SchemeConfig/BilevelConfig/SolverConfig fields")
    p.add_argument("--reg", choices=MODES, help="model (default tv-fid)")
    p.add_argument("--alpha0", type=float)
    p.add_argument("--alpha1", type=float)
    p.add_argument("--mollify-k", dest="mollify_k", type=float)
    p.add_argument("--c0", type=float, help="box constant: parameters lie in [c0, 1/c0]")
    p.add_argument("--tol", type=float, help="PDHG relative-change tolerance")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--backend", choices=("auto", "numba", "numpy"))
    if lam_flags:
        p.add_argument("--outer-tol", dest="outer_tol", type=float, help="tolerance on lambda steps")
        p.add_argument("--max-outer", dest="max_outer", type=int)
        p.add_argument("--lambda0", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptive-tv", description="Spatially adaptive TV/TGV denoising with learned weights.")
    parser.add_argument("--strict", action="store_true", help="exit 3 if any solver warning was raised")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress (and outer-loop traces) to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("denoise", help="denoise with a scalar or given spatial weight")
    p.add_argument("--noisy", required=True)
    p.add_argument("--clean", help="reference image for metrics")
    p.add_argument("--lam", type=float, default=1.0, help="scalar weight (fidelity, or TV radius in tv-reg modes)")
    p.add_argument("--weight", help="8-bit weight map, e.g. weight.pgm from subdivide")
    p.add_argument("--weight-range", dest="weight_range", nargs=2, type=float, metavar=("MIN", "MAX"))
    p.add_argument("-o", "--output", required=True, help="output directory")
    _scheme_flags(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("train", help="learn one fidelity weight on a region")
    p.add_argument("--clean", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--region", help="r0:r1,c0:c1 (default: whole image)")
    p.add_argument("-o", "--output", help="directory for report.json with the full trace")
    _scheme_flags(p, lam_flags=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("subdivide", help="adaptive subdivision and weighted restoration")
    p.add_argument("--clean", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--lmax", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("-o", "--output", required=True, help="output directory")
    _scheme_flags(p, lam_flags=True)
    p.set_defaults(func=cmd_subdivide)

    p = sub.add_parser("metrics", help="print {psnr, ssim, l2} of IMAGE against REFERENCE")
    p.add_argument("image")
    p.add_argument("reference")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("noise", help="add seeded Gaussian noise")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask", help="image scaling sigma pixelwise")
    p.set_defaults(func=cmd_noise)
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"adaptive-tv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        warn = args.func(args)
    except UsageError as exc:
        print(f"adaptive-tv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, DomainError) as exc:
        print(f"adaptive-tv: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"adaptive-tv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for msg in warn:
        print(f"adaptive-tv: warning: {msg}", file=sys.stderr)
    if warn and args.strict:
        return EXIT_WARN
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
