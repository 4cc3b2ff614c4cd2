"""Configuration-driven experiment runner: grid search and the four studies.

Reports are deterministic functions of (config, seeds, scripted oracle):
seeds drive every random stream, cells own streams derived from (seed, cell
index), and wall-clock timings are kept out of the canonical report JSON so
two identical runs serialize byte-for-byte identically.
"""

from __future__ import annotations

import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .bench import (
    BenchmarkDataset,
    TwinsStyleSpec,
    generate_twins_style,
    read_benchmark,
    remove_confounders,
    take_benchmark_rows,
)
from .data import ObservationalDataset, SplitSpec, split_indices, take_rows
from .estimators import (
    EstimatorConfig,
    TarnetSpec,
    fit_estimator,
    predict_cate,
)
from .kernels import KcitConfig, conditional_mutual_information
from .loop import (
    ProciConfig,
    ProciResult,
    generate_confounder,
    run_proci,
    run_proci_all_at_once,
    run_proci_direct_values,
    run_proci_fixed_iterations,
)
from .metrics import EffectEstimates, metric_report
from .oracle import BenchmarkOracle, ScriptedOracle

GRID_KEYS = {
    "lr": "learning_rate",
    "bs": "batch_size",
    "lambda": "balance_weight",
    "ridge": "ridge_penalty",
}
PAPER_GRID = {
    "lr": [1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
    "bs": [16, 32, 64, 128],
    "lambda": [1e-4, 1e-3, 1e-2, 1e-1, 1.0],
    "d_phi": [16, 32, 64],
    "d_h": [16, 32, 64],
}


@dataclass(frozen=True)
class EstimatorPlan:
    """One estimator in an experiment: its kind, grid, and base settings."""

    kind: str
    grid: dict = field(default_factory=dict)
    config: EstimatorConfig = field(default_factory=EstimatorConfig)
    spec: TarnetSpec = field(default_factory=TarnetSpec)


@dataclass(frozen=True)
class OracleSpec:
    """How experiments obtain an oracle: a benchmark rule or a script file."""

    source: str = "rule:truth-revealing"
    constant: float = 0.0

    def build(self, bench: BenchmarkDataset, seed: int):
        scheme, _, rest = self.source.partition(":")
        if scheme == "rule":
            return BenchmarkOracle(bench, rest, seed=seed, constant=self.constant)
        if scheme == "scripted":
            return ScriptedOracle.from_file(rest)
        raise ValueError(f"unsupported oracle source {self.source!r} for experiments")


@dataclass(frozen=True)
class ExperimentConfig:
    generator: TwinsStyleSpec | str
    estimators: tuple[EstimatorPlan, ...]
    seeds: tuple[int, ...]
    split_ratios: tuple[float, float, float] = (0.63, 0.27, 0.10)
    proci_enabled: bool = True
    oracle: OracleSpec = field(default_factory=OracleSpec)
    kcit: KcitConfig = field(default_factory=KcitConfig)
    max_iterations: int = 5
    removal_counts: tuple[int, ...] = (0, 1, 2, 3, 4)
    cmi_neighbors: int = 5
    fixed_k: int = 1
    workers: int = 1
    include_sqrt_pehe: bool = False

    def __post_init__(self):
        if not self.estimators:
            raise ValueError("need at least one estimator")
        for plan in self.estimators:
            for key, values in plan.grid.items():
                if not values:
                    raise ValueError(f"empty grid for {plan.kind}.{key}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if list(self.removal_counts) != sorted(set(self.removal_counts)):
            raise ValueError("removal_counts must be strictly increasing")


def _make_benchmark(cfg: ExperimentConfig, seed: int) -> BenchmarkDataset:
    if isinstance(cfg.generator, str):
        return read_benchmark(cfg.generator)
    return generate_twins_style(replace(cfg.generator, seed=seed))


def _cell_seed(seed: int, cell_id: int) -> int:
    return (int(seed) * 9_176_011 + 31 * cell_id + 7) % (2**63)


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSearchResult:
    config: EstimatorConfig
    spec: TarnetSpec
    val_loss: float
    cell: dict
    cells: tuple[dict, ...]
    model: object = None


def _apply_cell(plan: EstimatorPlan, cell: dict, seed: int, cell_id: int):
    cfg_kwargs = {}
    spec_kwargs = {"seed": _cell_seed(seed, cell_id)}
    for key, value in cell.items():
        if key in GRID_KEYS:
            cfg_kwargs[GRID_KEYS[key]] = value
        elif key == "d_phi":
            spec_kwargs["encoder_widths"] = (int(value),)
        elif key == "d_h":
            spec_kwargs["head_widths"] = (int(value),)
        else:
            raise ValueError(f"unknown grid key {key!r}")
    return replace(plan.config, **cfg_kwargs), replace(plan.spec, **spec_kwargs)


def _validation_factual_loss(model, val: ObservationalDataset) -> float:
    if not hasattr(model, "predict_outcome"):
        return 0.0  # matching models carry no factual predictor; grids are singletons
    pred = model.predict_outcome(val.covariates, val.treatments)
    return float(np.mean((pred - val.outcomes) ** 2))


def grid_search(
    plan: EstimatorPlan,
    train: ObservationalDataset,
    val: ObservationalDataset,
    seed: int = 0,
) -> GridSearchResult:
    """Train every grid cell and keep the one with minimal validation loss.

    Cells are enumerated in the cartesian-product order of the grid lists as
    written; ties keep the earliest cell. Cells that diverge are recorded and
    skipped; if every cell diverges the search fails.
    """
    keys = list(plan.grid.keys())
    combos = list(itertools.product(*(plan.grid[k] for k in keys))) if keys else [()]
    best: GridSearchResult | None = None
    cells: list[dict] = []
    for cell_id, combo in enumerate(combos):
        cell = dict(zip(keys, combo))
        cfg, spec = _apply_cell(plan, cell, seed, cell_id)
        try:
            model = fit_estimator(plan.kind, train, cfg, spec, val=val)
            loss = _validation_factual_loss(model, val)
        except RuntimeError as e:
            cells.append({"cell": cell, "status": "diverged", "error": str(e)})
            continue
        cells.append({"cell": cell, "status": "ok", "val_loss": loss})
        if best is None or loss < best.val_loss:
            best = GridSearchResult(
                config=cfg, spec=spec, val_loss=loss, cell=cell, cells=(), model=model
            )
    if best is None:
        raise RuntimeError(
            f"all {len(combos)} grid cells diverged for estimator {plan.kind!r}"
        )
    return replace(best, cells=tuple(cells))


# ---------------------------------------------------------------------------
# Shared evaluation plumbing
# ---------------------------------------------------------------------------

def _splits(bench: BenchmarkDataset, cfg: ExperimentConfig, seed: int):
    spec = SplitSpec(ratios=cfg.split_ratios, seed=seed)
    tr, va, te = split_indices(bench.base, spec)
    return tr, va, te


def _evaluate(model, bench: BenchmarkDataset, indices, include_sqrt: bool) -> dict:
    subset = take_benchmark_rows(bench, indices)
    est = EffectEstimates(tau_hat=predict_cate(model, subset.base.covariates))
    return metric_report(subset, est, include_sqrt_pehe=include_sqrt)


def _augmented_benchmark(bench: BenchmarkDataset, result: ProciResult) -> BenchmarkDataset:
    return replace(
        bench,
        base=result.augmented,
        base_columns=(),
        hidden_columns=(),
        hidden_values=None,
        hidden_metas=(),
    )


def _fit_and_score(
    plan: EstimatorPlan,
    bench: BenchmarkDataset,
    cfg: ExperimentConfig,
    seed: int,
    tr, va, te,
) -> dict:
    train = take_rows(bench.base, tr)
    val = take_rows(bench.base, va)
    in_idx = np.concatenate([tr, va])
    search = grid_search(plan, train, val, seed=seed)
    model = search.model
    return {
        "in_sample": _evaluate(model, bench, in_idx, cfg.include_sqrt_pehe),
        "out_sample": _evaluate(model, bench, te, cfg.include_sqrt_pehe),
        "chosen_cell": search.cell,
        "val_loss": search.val_loss,
    }


def _aggregate(per_seed: dict[str, dict]) -> dict:
    """Mean and sample sd per (split, metric) over seeds."""
    out: dict[str, dict] = {}
    for split in ("in_sample", "out_sample"):
        metrics: dict[str, list[float]] = {}
        for seed_result in per_seed.values():
            for name, value in seed_result[split].items():
                metrics.setdefault(name, []).append(value)
        out[split] = {
            name: {
                "mean": float(np.mean(vals)),
                "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            }
            for name, vals in metrics.items()
        }
    return out


def _map_seeds(cfg: ExperimentConfig, fn):
    """Run fn(seed) for every seed, optionally on a thread pool; results keep
    seed order regardless of scheduling."""
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(fn, cfg.seeds))
    else:
        results = [fn(s) for s in cfg.seeds]
    return dict(zip((str(s) for s in cfg.seeds), results))


@dataclass(frozen=True)
class RunReport:
    """Canonical (deterministic) report plus wall-clock timings kept apart."""

    report: dict
    timings: dict

    def to_json(self) -> str:
        return json.dumps(self.report, indent=2, sort_keys=True)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# RQ1: base vs augmented estimation quality
# ---------------------------------------------------------------------------

def run_rq1(cfg: ExperimentConfig) -> RunReport:
    """Fit every estimator on base and augmented data across seeds."""
    t0 = time.monotonic()
    timings: dict[str, float] = {}

    def one_seed(seed: int) -> dict:
        bench = _make_benchmark(cfg, seed)
        tr, va, te = _splits(bench, cfg, seed)
        out: dict = {"variants": {}, "proci": None}
        variants = {"base": bench}
        if cfg.proci_enabled:
            oracle = cfg.oracle.build(bench, seed)
            proci_cfg = ProciConfig(
                kcit=cfg.kcit,
                oracle=oracle,
                max_iterations=cfg.max_iterations,
                seed=seed,
            )
            result = run_proci(bench.base, proci_cfg)
            out["proci"] = result.to_summary()
            variants["proci"] = _augmented_benchmark(bench, result)
        for name, variant_bench in variants.items():
            out["variants"][name] = {
                plan.kind: _fit_and_score(plan, variant_bench, cfg, seed, tr, va, te)
                for plan in cfg.estimators
            }
        return out

    per_seed = _map_seeds(cfg, one_seed)
    timings["total_s"] = time.monotonic() - t0

    cells: dict = {}
    for plan in cfg.estimators:
        cells[plan.kind] = {}
        for variant in ("base", "proci") if cfg.proci_enabled else ("base",):
            per_seed_cells = {
                s: r["variants"][variant][plan.kind]
                for s, r in per_seed.items()
                if variant in r["variants"]
            }
            cells[plan.kind][variant] = {
                "per_seed": per_seed_cells,
                "aggregate": _aggregate(per_seed_cells),
            }
    report = {
        "experiment": "rq1",
        "seeds": [int(s) for s in cfg.seeds],
        "cells": cells,
        "proci_runs": {s: r["proci"] for s, r in per_seed.items()},
    }
    return RunReport(report=report, timings=timings)


# ---------------------------------------------------------------------------
# RQ2: information content of generated confounders
# ---------------------------------------------------------------------------

def run_rq2(cfg: ExperimentConfig) -> RunReport:
    """Conditional mutual information of generated vs random confounders."""
    t0 = time.monotonic()

    def one_seed(seed: int) -> dict:
        bench = _make_benchmark(cfg, seed)
        ds = bench.base
        oracle = cfg.oracle.build(bench, seed)
        proci_cfg = ProciConfig(
            kcit=cfg.kcit, oracle=oracle, max_iterations=cfg.max_iterations, seed=seed
        )
        _, column, record = generate_confounder(ds, oracle, proci_cfg, iteration=1)
        random_col = np.random.default_rng([seed, 997]).standard_normal(ds.n_units)
        x = ds.covariates
        t = ds.treatments.astype(np.float64)
        y = ds.outcomes
        k = cfg.cmi_neighbors
        return {
            "generated": {
                "name": record.name,
                "cmi_t": conditional_mutual_information(column, t, x, k=k),
                "cmi_y": conditional_mutual_information(column, y, x, k=k),
            },
            "random": {
                "cmi_t": conditional_mutual_information(random_col, t, x, k=k),
                "cmi_y": conditional_mutual_information(random_col, y, x, k=k),
            },
        }

    per_seed = _map_seeds(cfg, one_seed)
    wins_t = sum(
        1
        for r in per_seed.values()
        if r["generated"]["cmi_t"] > r["random"]["cmi_t"]
    )
    wins_y = sum(
        1
        for r in per_seed.values()
        if r["generated"]["cmi_y"] > r["random"]["cmi_y"]
    )
    report = {
        "experiment": "rq2",
        "seeds": [int(s) for s in cfg.seeds],
        "per_seed": per_seed,
        "wins": {"cmi_t": wins_t, "cmi_y": wins_y, "out_of": len(cfg.seeds)},
    }
    return RunReport(report=report, timings={"total_s": time.monotonic() - t0})


# ---------------------------------------------------------------------------
# RQ3: robustness to progressively removed confounders
# ---------------------------------------------------------------------------

def run_rq3(cfg: ExperimentConfig) -> RunReport:
    """Metric-vs-removal-count curves for base and augmented pipelines.

    Removal is progressive: the set of withheld columns at k contains the set
    at k-1. The augmented pipeline regenerates confounders with the loop
    before fitting.
    """
    t0 = time.monotonic()
    plan = cfg.estimators[0]
    ks = cfg.removal_counts

    def one_seed(seed: int) -> dict:
        bench_full = _make_benchmark(cfg, seed)
        if max(ks) > bench_full.base.n_covariates:
            raise ValueError(
                f"cannot remove {max(ks)} of {bench_full.base.n_covariates} columns"
            )
        tr, va, te = _splits(bench_full, cfg, seed)
        curves: dict = {}
        bench_k = bench_full
        previous_k = 0
        for k in ks:
            bench_k = remove_confounders(bench_k, k - previous_k, seed=seed * 101 + k)
            previous_k = k
            entry: dict = {}
            entry["base"] = _fit_and_score(plan, bench_k, cfg, seed, tr, va, te)
            if cfg.proci_enabled:
                oracle = cfg.oracle.build(bench_k, seed)
                proci_cfg = ProciConfig(
                    kcit=cfg.kcit,
                    oracle=oracle,
                    max_iterations=cfg.max_iterations,
                    seed=seed,
                )
                result = run_proci(bench_k.base, proci_cfg)
                aug = _augmented_benchmark(bench_k, result)
                entry["proci"] = _fit_and_score(plan, aug, cfg, seed, tr, va, te)
                entry["proci"]["loop"] = result.to_summary()
            curves[str(k)] = entry
        return curves

    per_seed = _map_seeds(cfg, one_seed)

    def mean_curve(variant: str, metric: str) -> list[float]:
        out = []
        for k in ks:
            vals = [
                per_seed[s][str(k)][variant]["out_sample"][metric]
                for s in per_seed
                if variant in per_seed[s][str(k)]
            ]
            out.append(float(np.mean(vals)))
        return out

    summary: dict = {"k": list(ks)}
    metric = "pehe"
    base_curve = mean_curve("base", metric)
    summary["base_out_pehe"] = base_curve
    if len(set(base_curve)) > 1:
        rho = float(spearmanr(list(ks), base_curve).statistic)
    else:
        rho = 0.0
    summary["base_spearman_k_vs_pehe"] = rho
    if cfg.proci_enabled:
        proci_curve = mean_curve("proci", metric)
        summary["proci_out_pehe"] = proci_curve
        base_deg = base_curve[-1] - base_curve[0]
        proci_deg = proci_curve[-1] - proci_curve[0]
        summary["base_degradation"] = base_deg
        summary["proci_degradation"] = proci_deg

    report = {
        "experiment": "rq3",
        "estimator": plan.kind,
        "seeds": [int(s) for s in cfg.seeds],
        "per_seed": per_seed,
        "summary": summary,
    }
    return RunReport(report=report, timings={"total_s": time.monotonic() - t0})


# ---------------------------------------------------------------------------
# RQ4: component ablations
# ---------------------------------------------------------------------------

def run_rq4(cfg: ExperimentConfig) -> RunReport:
    """Full pipeline vs the three ablations, same seeds and estimator."""
    t0 = time.monotonic()
    plan = cfg.estimators[0]

    def one_seed(seed: int) -> dict:
        bench = _make_benchmark(cfg, seed)
        tr, va, te = _splits(bench, cfg, seed)

        def proci_cfg(oracle) -> ProciConfig:
            return ProciConfig(
                kcit=cfg.kcit, oracle=oracle, max_iterations=cfg.max_iterations, seed=seed
            )

        runs = {
            "full": run_proci(bench.base, proci_cfg(cfg.oracle.build(bench, seed))),
            "wo_dr": run_proci_direct_values(
                bench.base,
                proci_cfg(BenchmarkOracle(bench, "collapsed-direct", seed=seed)),
            ),
            "wo_pi": run_proci_all_at_once(
                bench.base, proci_cfg(cfg.oracle.build(bench, seed))
            ),
            "wo_ut": run_proci_fixed_iterations(
                bench.base, proci_cfg(cfg.oracle.build(bench, seed)), k_fixed=cfg.fixed_k
            ),
        }
        out: dict = {}
        for name, result in runs.items():
            aug = _augmented_benchmark(bench, result)
            scored = _fit_and_score(plan, aug, cfg, seed, tr, va, te)
            scored["loop"] = result.to_summary()
            out[name] = scored
        return out

    per_seed = _map_seeds(cfg, one_seed)
    variants = ("full", "wo_dr", "wo_pi", "wo_ut")
    aggregate = {
        v: _aggregate({s: per_seed[s][v] for s in per_seed}) for v in variants
    }
    report = {
        "experiment": "rq4",
        "estimator": plan.kind,
        "seeds": [int(s) for s in cfg.seeds],
        "per_seed": per_seed,
        "aggregate": aggregate,
    }
    return RunReport(report=report, timings={"total_s": time.monotonic() - t0})
