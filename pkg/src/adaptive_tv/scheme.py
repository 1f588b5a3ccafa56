"""Adaptive dyadic subdivision of the fidelity/regularization weight.

Starting from the whole image, every cell at the current level is tentatively
split into its four children, each child gets its own learned scalar weight
(warm-started from the parent's), and the split is kept when the children's
summed training costs beat the parent's by the configured criterion.  The
final piecewise-constant weight then drives one weighted denoising solve on
the full image.

Within a level all children of all frontier cells are optimized as one
batch (they share a shape when the image side is divisible by ``2**l_max``);
levels are processed in order because children start from their parent's
weight.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Literal

import numpy as np

from . import metrics
from .bilevel import BilevelConfig, Regularizer, TrainingPair, optimize_lambda_batch
from .denoise_tgv import TGVProblem, solve_tgv
from .denoise_tv import TVProblem, solve_tv
from .partition import (
    BoxConstraint,
    ConfigurationError,
    DyadicCell,
    DyadicPartition,
    assemble_weight,
    mollify_lipschitz,
    pixel_slices,
    subdivide,
)
from .primal_dual import ConvergenceWarning, SolverConfig

log = logging.getLogger(__name__)

Mode = Literal["tv-fid", "tv-reg", "tv-reg-mollified", "tgv-fid"]
MODES = ("tv-fid", "tv-reg", "tv-reg-mollified", "tgv-fid")
FIDELITY_MODES = ("tv-fid", "tgv-fid")


@dataclass(frozen=True)
class SchemeConfig:
    """Settings for the subdivision scheme.

    ``rho`` mode splits a cell when ``sum C_children < rho * C_parent``;
    setting ``delta`` switches to the additive test
    ``C_parent >= sum C_children + delta`` instead.  ``box`` overrides the
    box of ``bilevel``.  ``solver`` is used for the per-cell problems and
    ``final_solver`` (default: ``solver`` with ``tol <= 1e-6``, 50k iterations) for
    the whole-image solve.  With ``baseline`` the image is also restored
    with the single root-cell parameter, for comparison.
    """

    rho: float = 1.0
    delta: float | None = None
    l_max: int = 4
    mode: Mode = "tv-fid"
    alpha0: float = 1.0
    alpha1: float = 2.0
    mollify_k: float = 10.0
    box: BoxConstraint = field(default_factory=BoxConstraint)
    bilevel: BilevelConfig = field(default_factory=lambda: BilevelConfig(rel_tol=2e-3, max_outer=25))
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(tol=1e-5, max_iter=20_000))
    final_solver: SolverConfig | None = None
    baseline: bool = True

    def __post_init__(self):
        if self.rho <= 0:
            raise ConfigurationError("rho must be positive")
        if self.delta is not None and self.delta < 0:
            raise ConfigurationError("delta must be nonnegative")
        if self.l_max < 0:
            raise ConfigurationError("l_max must be nonnegative")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.alpha0 <= 0 or self.alpha1 <= 0 or self.mollify_k <= 0:
            raise ConfigurationError("alpha0, alpha1 and mollify_k must be positive")
        if self.bilevel.box != self.box:
            object.__setattr__(self, "bilevel", replace(self.bilevel, box=self.box))

    def check_dims(self, dims: tuple[int, int]) -> None:
        if (1 << self.l_max) > min(dims):
            raise ConfigurationError(f"2**l_max = {1 << self.l_max} exceeds the smaller image side {min(dims)}")

    @property
    def regularizer(self) -> Regularizer:
        kind = "tgv" if self.mode == "tgv-fid" else "tv"
        return Regularizer(kind, self.alpha0, self.alpha1)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(val) if dataclasses.is_dataclass(val) else val
        return out


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid {where}: {exc}")


def scheme_config_from_dict(data: dict) -> SchemeConfig:
    """Inverse of :meth:`SchemeConfig.to_dict`; nested keys mirror the dataclass fields.

    Missing keys keep their defaults, so a partial document such as
    ``{"l_max": 3, "bilevel": {"tol": 1e-3}}`` is valid.
    """
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    data = dict(data)
    defaults = SchemeConfig()
    box = _build(BoxConstraint, data.pop("box", None) or dataclasses.asdict(defaults.box), "box")
    bil = dict(data.pop("bilevel", None) or {})
    bil.pop("box", None)
    bilevel = _build(BilevelConfig, {**_shallow(defaults.bilevel), **bil}, "bilevel")
    solver = _build(SolverConfig, {**_shallow(defaults.solver), **(data.pop("solver", None) or {})}, "solver")
    final = data.pop("final_solver", None)
    final_solver = None if final is None else _build(SolverConfig, final, "final_solver")
    try:
        solver.validate()
        if final_solver is not None:
            final_solver.validate()
    except ValueError as exc:
        raise ConfigurationError(f"invalid solver settings: {exc}")
    return _build(
        SchemeConfig,
        {**data, "box": box, "bilevel": replace(bilevel, box=box), "solver": solver, "final_solver": final_solver},
        "config",
    )


def _shallow(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.name != "box"}


@dataclass
class Decision:
    cell: DyadicCell
    parent_cost: float
    children_cost: float
    subdivided: bool


@dataclass
class SchemeResult:
    partition: DyadicPartition
    cell_params: dict  # cell -> (lambda, cost)
    weight: np.ndarray
    restored: np.ndarray
    metrics: dict
    warnings: list
    decisions: list
    config: SchemeConfig
    baseline: dict | None = None  # {"lambda", "metrics"} of the global-parameter solve

    def lambdas(self) -> dict:
        return {c: lam for c, (lam, _) in self.cell_params.items()}

    def costs(self) -> dict:
        return {c: cost for c, (_, cost) in self.cell_params.items()}


def final_weight(partition: DyadicPartition, lambdas: dict, dims, mode: Mode, alpha0: float = 1.0) -> np.ndarray:
    """Piecewise-constant weight: ``lambda_L`` (fidelity modes) or ``alpha0 / lambda_L``.

    With constant weights, fidelity ``lambda`` and regularization ``alpha0``
    give the same minimizer as fidelity 1 and regularization
    ``alpha0 / lambda``.
    """
    if mode in FIDELITY_MODES:
        values = lambdas
    else:
        values = {c: alpha0 / lam for c, lam in lambdas.items()}
    return assemble_weight(partition, values, dims)


def result_weight(result: SchemeResult) -> np.ndarray:
    """The weight map of a finished run (see :func:`final_weight`)."""
    cfg = result.config
    return final_weight(result.partition, result.lambdas(), result.restored.shape, cfg.mode, cfg.alpha0)


def weighted_denoise(
    noisy: np.ndarray,
    weight: np.ndarray,
    mode: Mode,
    cfg: SolverConfig | None = None,
    alpha0: float = 1.0,
    alpha1: float = 2.0,
    mollify_k: float = 10.0,
):
    """Whole-image solve with a spatial weight; returns the solver result.

    Fidelity modes use ``weight`` as the fidelity map; ``tv-reg`` uses it as
    the pixelwise TV radius with unit fidelity, and ``tv-reg-mollified``
    first replaces it by its ``mollify_k``-Lipschitz lower envelope.
    """
    cfg = cfg or SolverConfig()
    if mode == "tv-fid":
        return solve_tv(TVProblem(noisy, alpha=alpha0, lam=weight), cfg)
    if mode == "tgv-fid":
        return solve_tgv(TGVProblem(noisy, alpha0=alpha0, alpha1=alpha1, lam=weight), cfg)
    if mode == "tv-reg":
        return solve_tv(TVProblem(noisy, alpha=weight, lam=1.0), cfg)
    if mode == "tv-reg-mollified":
        return solve_tv(TVProblem(noisy, alpha=mollify_lipschitz(weight, mollify_k), lam=1.0), cfg)
    raise ConfigurationError(f"unknown mode {mode!r}")


def _split(cost_parent: float, cost_children: float, cfg: SchemeConfig) -> bool:
    if cfg.delta is not None:
        return cost_parent >= cost_children + cfg.delta
    return cost_children < cfg.rho * cost_parent


def _optimize_cells(pair: TrainingPair, cells, init, cfg: SchemeConfig, bcfg: BilevelConfig, warn_list):
    """Learn ``(lambda, cost)`` for ``cells``; cells of equal pixel shape share a batch."""
    dims = pair.clean.shape
    groups: dict[tuple[int, int], list] = {}
    for cell, lam0 in zip(cells, init):
        rs, cs = pixel_slices(cell, dims)
        groups.setdefault((rs.stop - rs.start, cs.stop - cs.start), []).append((cell, lam0, rs, cs))
    out = {}
    for items in groups.values():
        clean = np.stack([pair.clean[rs, cs] for _, _, rs, cs in items])
        noisy = np.stack([pair.noisy[rs, cs] for _, _, rs, cs in items])
        lam0 = np.array([lam for _, lam, _, _ in items])
        res = optimize_lambda_batch(TrainingPair(clean, noisy), cfg.regularizer, bcfg, cfg.solver, lambda0=lam0)
        for msg in res.warnings:
            warn_list.append(f"level {items[0][0].level}: {msg}")
        for n, (cell, _, _, _) in enumerate(items):
            out[cell] = (float(res.lambda_star[n]), float(res.cost[n]))
    return out


def run_scheme(pair: TrainingPair, cfg: SchemeConfig | None = None) -> SchemeResult:
    """Adaptive subdivision, weight assembly and final weighted denoising."""
    cfg = cfg or SchemeConfig()
    if pair.clean.ndim != 2:
        raise ConfigurationError("run_scheme expects a single (H, W) training pair")
    dims = pair.clean.shape
    cfg.check_dims(dims)
    bcfg = replace(cfg.bilevel, box=cfg.box)
    warn_list: list[str] = []
    decisions: list[Decision] = []

    root = DyadicCell(0, 0, 0)
    params = _optimize_cells(pair, [root], [bcfg.lambda0], cfg, bcfg, warn_list)
    partition = DyadicPartition.root()

    for level in range(cfg.l_max):
        frontier = partition.cells_at_level(level)
        if not frontier:
            break
        children = [child for cell in frontier for child in subdivide(cell)]
        init = [params[cell][0] for cell in frontier for _ in range(4)]
        child_params = _optimize_cells(pair, children, init, cfg, bcfg, warn_list)
        for cell in frontier:
            kids = subdivide(cell)
            parent_cost = params[cell][1]
            kids_cost = math.fsum(child_params[k][1] for k in kids)
            split = _split(parent_cost, kids_cost, cfg)
            decisions.append(Decision(cell, parent_cost, kids_cost, split))
            if split:
                partition = partition.refine(cell)
                for k in kids:
                    params[k] = child_params[k]
        log.info("level %d: %d of %d cells subdivided", level, sum(d.subdivided for d in decisions if d.cell.level == level), len(frontier))

    cell_params = {cell: params[cell] for cell in partition}
    lambdas = {c: p[0] for c, p in cell_params.items()}
    weight = final_weight(partition, lambdas, dims, cfg.mode, cfg.alpha0)
    final_cfg = cfg.final_solver or replace(
        cfg.solver, tol=min(cfg.solver.tol, 1e-6), max_iter=max(cfg.solver.max_iter, 50_000)
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        final = weighted_denoise(pair.noisy, weight, cfg.mode, final_cfg, cfg.alpha0, cfg.alpha1, cfg.mollify_k)
    warn_list.extend(f"final solve: {w.message}" for w in caught)
    restored = final.u
    baseline = None
    if cfg.baseline:
        root_lam = params[root][0]
        flat = final_weight(DyadicPartition.root(), {root: root_lam}, dims, cfg.mode, cfg.alpha0)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            glob = weighted_denoise(pair.noisy, flat, cfg.mode, final_cfg, cfg.alpha0, cfg.alpha1, cfg.mollify_k)
        warn_list.extend(f"baseline solve: {w.message}" for w in caught)
        baseline = {"lambda": root_lam, "metrics": image_metrics(glob.u, pair.clean)}
    return SchemeResult(
        partition=partition,
        cell_params=cell_params,
        weight=weight,
        restored=restored,
        metrics=image_metrics(restored, pair.clean),
        warnings=warn_list,
        decisions=decisions,
        config=cfg,
        baseline=baseline,
    )


def image_metrics(restored: np.ndarray, clean: np.ndarray) -> dict:
    """``{psnr, ssim, l2}``; SSIM is ``None`` for images smaller than its window."""
    try:
        ssim = metrics.ssim(restored, clean)
    except ValueError:
        ssim = None
    psnr = metrics.psnr(restored, clean)
    return {"psnr": None if math.isinf(psnr) else psnr, "ssim": ssim, "l2": metrics.l2_loss(restored, clean)}


def bound_status(lam: float, box: BoxConstraint) -> str | None:
    if lam <= box.lower:
        return "lower-bound-active"
    if lam >= box.upper:
        return "upper-bound-active"
    return None


def stopping_report(result: SchemeResult) -> dict:
    """Per-level subdivision counts, depth, smallest cell and box-bound activity."""
    cfg = result.config
    part = result.partition
    if part.depth > cfg.l_max:
        raise AssertionError(f"partition depth {part.depth} exceeds l_max {cfg.l_max}")
    dims = result.restored.shape
    levels = {}
    for d in result.decisions:
        entry = levels.setdefault(d.cell.level, {"tested": 0, "subdivided": 0})
        entry["tested"] += 1
        entry["subdivided"] += int(d.subdivided)
    deepest = max(part, key=lambda c: c.level)
    rs, cs = pixel_slices(deepest, dims)
    flagged = []
    for cell, (lam, _) in sorted(result.cell_params.items()):
        status = bound_status(lam, cfg.box)
        if status:
            flagged.append({**cell.to_dict(), "lambda": lam, "status": status})
    return {
        "depth": part.depth,
        "l_max": cfg.l_max,
        "n_cells": len(part),
        "cells_per_level": {str(lv): len(part.cells_at_level(lv)) for lv in range(part.depth + 1)},
        "decisions_per_level": {str(k): v for k, v in sorted(levels.items())},
        "min_cell_pixels": [rs.stop - rs.start, cs.stop - cs.start],
        "bound_active": flagged,
    }


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def report_dict(result: SchemeResult, extra: dict | None = None) -> dict:
    """The report document: ``{config, cells, metrics, warnings}`` (plus ``extra`` keys)."""
    cfg = result.config
    cells = []
    for cell, (lam, cost) in sorted(result.cell_params.items()):
        cells.append({**cell.to_dict(), "lambda": lam, "cost": cost, "bound_active": bound_status(lam, cfg.box)})
    doc = {
        "config": cfg.to_dict(),
        "cells": cells,
        "metrics": dict(result.metrics),
        "warnings": list(result.warnings),
    }
    if result.baseline is not None:
        doc["baseline"] = dict(result.baseline)
    if extra:
        doc.update(extra)
    return _jsonable(doc)


def report_json(result: SchemeResult, extra: dict | None = None) -> str:
    return json.dumps(report_dict(result, extra), indent=2, sort_keys=True)


def report_schema() -> dict:
    """The JSON schema that :func:`report_dict` output conforms to."""
    text = resources.files("adaptive_tv").joinpath("report_schema.json").read_text()
    return json.loads(text)
