"""Semi-synthetic benchmark generators with known potential outcomes.

Two constructions are provided: a birth-records-style generator in which a
withheld proxy variable drives both treatment selection and the outcome, and
a job-training-style composition that merges a randomized experiment with an
observational control pool. Both emit :class:`~proci.data.BenchmarkDataset`
objects whose ground truth supports every evaluation metric.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import (
    BenchmarkDataset,
    ObservationalDataset,
    VariableMeta,
    default_metas,
)

PROXY_NAME = "gestational_age_decile"
PROXY_DESCRIPTION = (
    "Gestational age grouped into ordered categories; later-term pregnancies "
    "shift both which twin is recorded as treated and the mortality outcome."
)

_DATASET_INTRO = (
    "Synthetic birth-records cohort modeled on twin-birth studies: each unit "
    "carries demographic and pregnancy covariates, a binary treatment, and a "
    "health outcome, with treatment assignment tilted by gestational age."
)


@dataclass(frozen=True)
class OutcomeCoefficients:
    """Linear structural form of both potential outcomes.

    y_t = baseline . x + proxy_weight * (z / 10) + t * (effect_intercept +
    effect_slopes . x) + noise, with one shared noise draw per unit so the
    unit-level effect is exactly effect_intercept + effect_slopes . x.
    """

    baseline: tuple[float, ...]
    proxy_weight: float
    effect_intercept: float
    effect_slopes: tuple[float, ...]


@dataclass(frozen=True)
class TwinsStyleSpec:
    n: int
    d: int
    proxy_levels: int = 10
    w_outcome: OutcomeCoefficients | None = None
    noise_sd: float = 0.5
    seed: int = 0
    hide_proxy: bool = True
    selection_scale: float = 1.0

    def __post_init__(self):
        if self.n < 10:
            raise ValueError("need n >= 10")
        if self.proxy_levels < 2:
            raise ValueError("need at least 2 proxy levels")
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        if not self.selection_scale > 0:
            raise ValueError("selection_scale must be positive")

    def resolved_outcome(self) -> OutcomeCoefficients:
        if self.w_outcome is not None:
            if len(self.w_outcome.baseline) != self.d or len(self.w_outcome.effect_slopes) != self.d:
                raise ValueError("outcome coefficient lengths must equal d")
            return self.w_outcome
        rng = np.random.default_rng([self.seed, 91])
        return OutcomeCoefficients(
            baseline=tuple(rng.normal(0.0, 1.0, self.d)),
            proxy_weight=3.0,
            effect_intercept=1.0,
            effect_slopes=tuple(rng.normal(0.0, 0.5, self.d)),
        )


@dataclass(frozen=True)
class SelectionBiasParams:
    """Treatment-assignment weights, drawn once per dataset.

    w_o has i.i.d. N(0, 0.1) entries (variance 0.1) and w_h is N(5, 0.1);
    both are recorded in the benchmark provenance for reproducibility.
    """

    w_o: tuple[float, ...]
    w_h: float


def draw_selection_bias_params(d: int, seed: int, scale: float = 1.0) -> SelectionBiasParams:
    """Draw selection weights; ``scale`` multiplies the covariate weights.

    The default scale of 1 gives the contract distributions; robustness
    scenarios dial it up so that every covariate is a detectable confounder.
    """
    rng = np.random.default_rng([seed, 17])
    return SelectionBiasParams(
        w_o=tuple(scale * rng.normal(0.0, np.sqrt(0.1), d)),
        w_h=float(rng.normal(5.0, np.sqrt(0.1))),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def assign_selection_bias(
    x: np.ndarray, z: np.ndarray, params: SelectionBiasParams, seed: int
) -> np.ndarray:
    """Bernoulli treatment draws with P(T=1) = sigmoid(w_o.x + w_h (z/10 - 0.1))."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z)
    if x.ndim != 2 or z.shape != (x.shape[0],):
        raise ValueError("x must be (n, d) and z length n")
    if len(params.w_o) != x.shape[1]:
        raise ValueError(f"w_o has length {len(params.w_o)}, expected {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite covariates")
    logits = x @ np.asarray(params.w_o) + params.w_h * (z / 10.0 - 0.1)
    rng = np.random.default_rng([seed, 29])
    return (rng.random(x.shape[0]) < _sigmoid(logits)).astype(np.int64)


def generate_twins_style(
    spec: TwinsStyleSpec, params: SelectionBiasParams | None = None
) -> BenchmarkDataset:
    """Generate a selection-biased benchmark with a proxy-driven treatment.

    Covariates are standard normal, the proxy Z is uniform over its levels,
    and potential outcomes follow the documented linear structural form. With
    ``hide_proxy`` (the default) Z is withheld from the base covariates and
    recorded as a hidden column, so it plays the hidden-confounder role;
    otherwise Z appears as the last observed covariate.
    """
    rng = np.random.default_rng([spec.seed, 3])
    x = rng.standard_normal((spec.n, spec.d))
    z = rng.integers(1, spec.proxy_levels + 1, size=spec.n)
    if params is None:
        params = draw_selection_bias_params(spec.d, spec.seed, scale=spec.selection_scale)

    coef = spec.resolved_outcome()
    noise = spec.noise_sd * rng.standard_normal(spec.n)
    base_surface = x @ np.asarray(coef.baseline) + coef.proxy_weight * (z / 10.0)
    effect = coef.effect_intercept + x @ np.asarray(coef.effect_slopes)
    true_y0 = base_surface + noise
    true_y1 = base_surface + effect + noise

    t = assign_selection_bias(x, z, params, spec.seed)
    y = np.where(t == 1, true_y1, true_y0)

    cov_names = [f"x{i + 1}" for i in range(spec.d)]
    proxy_meta = VariableMeta(PROXY_NAME, PROXY_DESCRIPTION, "covariate")
    if spec.hide_proxy:
        covariates = x
        metas = default_metas(
            cov_names,
            treatment=("heavier_twin", "Indicator for the heavier twin of the pair."),
            outcome=("mortality_score", "Continuous one-year health risk score."),
        )
        hidden_columns = (spec.d,)
        hidden_values = z.astype(np.float64)[:, None]
        hidden_metas = (proxy_meta,)
        base_columns = tuple(range(spec.d))
    else:
        covariates = np.column_stack([x, z.astype(np.float64)])
        metas = tuple(
            list(
                default_metas(
                    cov_names + [PROXY_NAME],
                    treatment=("heavier_twin", "Indicator for the heavier twin of the pair."),
                    outcome=("mortality_score", "Continuous one-year health risk score."),
                    covariate_descriptions={PROXY_NAME: PROXY_DESCRIPTION},
                )
            )
        )
        hidden_columns = ()
        hidden_values = None
        hidden_metas = ()
        base_columns = tuple(range(spec.d + 1))

    base = ObservationalDataset(
        covariates=covariates,
        treatments=t,
        outcomes=y,
        meta=metas,
        dataset_intro=_DATASET_INTRO,
    )
    return BenchmarkDataset(
        base=base,
        true_y0=true_y0,
        true_y1=true_y1,
        randomized_mask=np.zeros(spec.n, dtype=bool),
        hidden_columns=hidden_columns,
        hidden_values=hidden_values,
        hidden_metas=hidden_metas,
        base_columns=base_columns,
        provenance={
            "generator": "twins-style",
            "n": spec.n,
            "d": spec.d,
            "proxy_levels": spec.proxy_levels,
            "noise_sd": spec.noise_sd,
            "seed": spec.seed,
            "hide_proxy": spec.hide_proxy,
            "w_o": list(params.w_o),
            "w_h": params.w_h,
            "outcome_coefficients": {
                "baseline": list(coef.baseline),
                "proxy_weight": coef.proxy_weight,
                "effect_intercept": coef.effect_intercept,
                "effect_slopes": list(coef.effect_slopes),
            },
        },
    )


def build_jobs_style(
    experimental: ObservationalDataset, observational_controls: ObservationalDataset
) -> BenchmarkDataset:
    """Concatenate a randomized experiment with an observational control pool.

    The randomized mask marks exactly the experimental rows; potential-outcome
    vectors stay undefined because evaluation uses only the randomized subset.
    """
    exp_names = [m.name for m in experimental.covariate_metas]
    obs_names = [m.name for m in observational_controls.covariate_metas]
    if exp_names != obs_names:
        raise ValueError(f"covariate schema mismatch: {exp_names} vs {obs_names}")
    if not ((experimental.treatments == 1).any() and (experimental.treatments == 0).any()):
        raise ValueError("experimental component must contain both arms")
    if (observational_controls.treatments == 1).any():
        raise ValueError("observational component must contain only control units")

    base = ObservationalDataset(
        covariates=np.vstack([experimental.covariates, observational_controls.covariates]),
        treatments=np.concatenate(
            [experimental.treatments, observational_controls.treatments]
        ),
        outcomes=np.concatenate([experimental.outcomes, observational_controls.outcomes]),
        meta=experimental.meta,
        dataset_intro=experimental.dataset_intro,
    )
    mask = np.zeros(base.n_units, dtype=bool)
    mask[: experimental.n_units] = True
    return BenchmarkDataset(
        base=base,
        true_y0=None,
        true_y1=None,
        randomized_mask=mask,
        provenance={
            "generator": "jobs-style",
            "n_experimental": experimental.n_units,
            "n_observational": observational_controls.n_units,
        },
    )


def remove_confounders(ds: BenchmarkDataset, k: int, seed: int) -> BenchmarkDataset:
    """Withhold k uniformly chosen covariate columns from the base dataset.

    Removed columns move to the hidden record; ground-truth outcome vectors
    and factual data are untouched.
    """
    d = ds.base.n_covariates
    if not 0 <= k <= d:
        raise ValueError(f"k={k} outside [0, {d}]")
    if k == 0:
        return ds
    rng = np.random.default_rng([seed, 41])
    drop = np.sort(rng.choice(d, size=k, replace=False))
    keep = np.array([j for j in range(d) if j not in set(drop.tolist())], dtype=np.int64)

    cov_metas = ds.base.covariate_metas
    other_metas = tuple(m for m in ds.base.meta if m.kind in ("treatment", "outcome"))
    new_base = replace(
        ds.base,
        covariates=ds.base.covariates[:, keep],
        meta=tuple(cov_metas[j] for j in keep) + other_metas,
    )

    dropped_values = ds.base.covariates[:, drop]
    new_hidden_values = (
        dropped_values
        if ds.hidden_values is None
        else np.column_stack([ds.hidden_values, dropped_values])
    )
    return replace(
        ds,
        base=new_base,
        hidden_columns=ds.hidden_columns + tuple(ds.base_columns[j] for j in drop),
        hidden_values=new_hidden_values,
        hidden_metas=ds.hidden_metas + tuple(cov_metas[j] for j in drop),
        base_columns=tuple(ds.base_columns[j] for j in keep),
    )


def take_benchmark_rows(ds: BenchmarkDataset, indices) -> BenchmarkDataset:
    """Row subset of a benchmark, keeping ground truth and hidden data aligned."""
    idx = np.asarray(indices, dtype=np.int64)
    from .data import take_rows

    return replace(
        ds,
        base=take_rows(ds.base, idx),
        true_y0=None if ds.true_y0 is None else ds.true_y0[idx],
        true_y1=None if ds.true_y1 is None else ds.true_y1[idx],
        randomized_mask=ds.randomized_mask[idx],
        hidden_values=None if ds.hidden_values is None else ds.hidden_values[idx],
    )


# ---------------------------------------------------------------------------
# Directory emission
# ---------------------------------------------------------------------------

def write_benchmark(ds: BenchmarkDataset, out_dir: str | Path) -> None:
    """Emit covariates.csv, treatment_outcome.csv, ground_truth.csv, meta.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [m.name for m in ds.base.covariate_metas]

    with (out / "covariates.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in ds.base.covariates:
            writer.writerow([repr(float(v)) for v in row])

    with (out / "treatment_outcome.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([ds.base.treatment_meta.name, ds.base.outcome_meta.name])
        for t, y in zip(ds.base.treatments, ds.base.outcomes):
            writer.writerow([int(t), repr(float(y))])

    with (out / "ground_truth.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y0", "y1", "randomized"])
        for i in range(ds.base.n_units):
            y0 = "" if ds.true_y0 is None else repr(float(ds.true_y0[i]))
            y1 = "" if ds.true_y1 is None else repr(float(ds.true_y1[i]))
            writer.writerow([y0, y1, int(ds.randomized_mask[i])])

    meta = {
        "provenance": ds.provenance,
        "dataset_intro": ds.base.dataset_intro,
        "hidden_columns": list(ds.hidden_columns),
        "hidden_names": [m.name for m in ds.hidden_metas],
        "variables": {
            m.name: {"description": m.description, "kind": m.kind}
            for m in tuple(ds.base.meta) + tuple(ds.hidden_metas)
        },
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if ds.hidden_values is not None and ds.hidden_values.shape[1]:
        with (out / "hidden.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([m.name for m in ds.hidden_metas])
            for row in ds.hidden_values:
                writer.writerow([repr(float(v)) for v in row])


def _read_csv_table(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def read_benchmark(in_dir: str | Path) -> BenchmarkDataset:
    """Load a benchmark previously emitted by :func:`write_benchmark`."""
    src = Path(in_dir)
    meta_doc = json.loads((src / "meta.json").read_text())
    variables = meta_doc["variables"]

    cov_header, cov_rows = _read_csv_table(src / "covariates.csv")
    covariates = np.asarray([[float(v) for v in row] for row in cov_rows])
    ty_header, ty_rows = _read_csv_table(src / "treatment_outcome.csv")
    treatments = np.asarray([int(row[0]) for row in ty_rows], dtype=np.int64)
    outcomes = np.asarray([float(row[1]) for row in ty_rows])

    _, gt_rows = _read_csv_table(src / "ground_truth.csv")
    has_truth = bool(gt_rows and gt_rows[0][0] != "")
    true_y0 = np.asarray([float(r[0]) for r in gt_rows]) if has_truth else None
    true_y1 = np.asarray([float(r[1]) for r in gt_rows]) if has_truth else None
    mask = np.asarray([bool(int(r[2])) for r in gt_rows])

    def meta_for(name: str, default_kind: str) -> VariableMeta:
        entry = variables.get(name, {})
        return VariableMeta(
            name, entry.get("description", ""), entry.get("kind", default_kind)
        )

    metas = [meta_for(n, "covariate") for n in cov_header]
    metas.append(meta_for(ty_header[0], "treatment"))
    metas.append(meta_for(ty_header[1], "outcome"))
    base = ObservationalDataset(
        covariates=covariates,
        treatments=treatments,
        outcomes=outcomes,
        meta=tuple(metas),
        dataset_intro=meta_doc.get("dataset_intro", ""),
    )

    hidden_values = None
    hidden_metas: tuple[VariableMeta, ...] = ()
    hidden_path = src / "hidden.csv"
    if hidden_path.exists():
        h_header, h_rows = _read_csv_table(hidden_path)
        hidden_values = np.asarray([[float(v) for v in row] for row in h_rows])
        hidden_names = meta_doc.get("hidden_names", h_header)
        hidden_metas = tuple(meta_for(n, "covariate") for n in hidden_names)
    return BenchmarkDataset(
        base=base,
        true_y0=true_y0,
        true_y1=true_y1,
        randomized_mask=mask,
        hidden_columns=tuple(meta_doc.get("hidden_columns", ())),
        hidden_values=hidden_values,
        hidden_metas=hidden_metas,
        provenance=meta_doc.get("provenance", {}),
    )
