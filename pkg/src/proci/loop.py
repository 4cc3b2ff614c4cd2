"""The progressive generate/impute/validate loop.

Each iteration proposes one new confounder from the current augmented
context, imputes its per-unit values through distributional reasoning,
re-imputes the counterfactual outcomes (their prompt sees the newest
confounder), and runs the conditional-independence test on the augmented
covariate set. The loop stops at the first passing iteration or at the
iteration cap. Generated columns are standardized before being appended so
arbitrarily scaled oracle output cannot dominate kernel bandwidths; the raw
values are retained in the confounder records.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import ObservationalDataset, append_confounder, write_dataset_csv
from .imputation import (
    PerUnitParams,
    PotentialOutcomeTable,
    construct_potential_outcomes,
    sample_confounder_values,
    standardize_column,
    write_po_table_csv,
)
from .kernels import KcitConfig, KcitResult, kcit_pvalue
from .oracle import (
    ChatOracle,
    HttpChatOracle,
    OracleConfig,
    OracleError,
    Transcript,
    context_from_dataset,
    identify_distribution,
    impute_counterfactuals,
    infer_parameters,
    propose_variable,
)


@dataclass(frozen=True)
class ProciConfig:
    """Loop-level settings; the oracle is a config or a ready oracle object."""

    kcit: KcitConfig
    oracle: object
    max_iterations: int = 5
    seed: int = 0
    batch_size: int = 50
    retries: int = 1
    dataset_name: str = "observational"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class GeneratedConfounder:
    """Record of one generated column: identity, family, and raw values."""

    name: str
    explanation: str
    family: str
    params_digest: str
    values: np.ndarray
    standardize_mean: float
    standardize_sd: float

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "explanation": self.explanation,
            "family": self.family,
            "params_digest": self.params_digest,
            "standardize_mean": self.standardize_mean,
            "standardize_sd": self.standardize_sd,
            "values": [float(v) for v in self.values],
        }


@dataclass(frozen=True)
class ProciResult:
    augmented: ObservationalDataset
    confounders: tuple[GeneratedConfounder, ...]
    potential_outcomes: PotentialOutcomeTable | None
    iteration_log: tuple[KcitResult, ...]
    termination: str
    passed_iteration: int | None = None
    failure: str | None = None
    precheck: KcitResult | None = None

    def to_summary(self) -> dict:
        return {
            "termination": self.termination,
            "passed_iteration": self.passed_iteration,
            "failure": self.failure,
            "n_confounders": len(self.confounders),
            "precheck": None if self.precheck is None else self.precheck.to_dict(),
            "iterations": [r.to_dict() for r in self.iteration_log],
        }


def resolve_oracle(handle: object) -> ChatOracle:
    if isinstance(handle, OracleConfig):
        return HttpChatOracle(handle)
    if hasattr(handle, "complete"):
        return handle
    raise TypeError(f"not an oracle: {handle!r}")


def _params_digest(params) -> str:
    blob = json.dumps([list(p) for p in params]).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _iteration_seed(base: int, k: int) -> int:
    return (int(base) * 1_000_003 + k) % (2**63)


def _counterfactual_context(ds: ObservationalDataset, dataset_name: str, has_generated: bool):
    """Context for outcome imputation: newest confounder shown separately."""
    rows = range(ds.n_units)
    if has_generated:
        base = replace(
            ds,
            covariates=ds.covariates[:, :-1],
            meta=tuple(m for m in ds.meta if m is not ds.covariate_metas[-1]),
        )
        ctx = context_from_dataset(base, dataset_name, rows=rows)
        table = replace(ctx.values, confounder=ds.covariates[:, -1])
        return replace(ctx, values=table)
    return context_from_dataset(ds, dataset_name, rows=rows)


def _impute_outcomes(
    ds: ObservationalDataset,
    oracle: ChatOracle,
    cfg: ProciConfig,
    transcript: Transcript | None,
    has_generated: bool,
) -> PotentialOutcomeTable:
    ctx = _counterfactual_context(ds, cfg.dataset_name, has_generated)
    binary = set(np.unique(ds.outcomes).tolist()) <= {0.0, 1.0}
    y_cf = impute_counterfactuals(
        oracle,
        ctx,
        batch_size=cfg.batch_size,
        retries=cfg.retries,
        binary_outcome=binary,
        transcript=transcript,
    )
    return construct_potential_outcomes(ds.treatments, ds.outcomes, y_cf)


def _run_kcit(ds: ObservationalDataset, po: PotentialOutcomeTable, kcit: KcitConfig, k: int) -> KcitResult:
    cfg_k = replace(kcit, seed=_iteration_seed(kcit.seed, k))
    return kcit_pvalue(po.stacked(), ds.treatments.astype(np.float64), ds.covariates, cfg_k)


def kcit_precheck(
    ds: ObservationalDataset, potential_outcomes: PotentialOutcomeTable, cfg: KcitConfig
) -> KcitResult:
    """Baseline test on the unaugmented covariate set (iteration 0)."""
    return _run_kcit(ds, potential_outcomes, cfg, k=0)


def generate_confounder(
    ds: ObservationalDataset,
    oracle: ChatOracle,
    cfg: ProciConfig,
    iteration: int,
    transcript: Transcript | None = None,
    context_ds: ObservationalDataset | None = None,
):
    """One generation phase: propose, pick a family, infer params, sample.

    ``context_ds`` overrides the dataset used for prompt context (the
    all-at-once ablation keeps it fixed at the original covariates while the
    progressive loop lets it grow). Returns the variable metadata, the raw
    sampled values, their standardization, and the confounder record.
    """
    context_source = context_ds if context_ds is not None else ds
    ctx = context_from_dataset(context_source, cfg.dataset_name)
    meta, explanation = propose_variable(oracle, ctx, retries=cfg.retries, transcript=transcript)
    family = identify_distribution(oracle, ctx, meta, retries=cfg.retries, transcript=transcript)
    value_ctx = context_from_dataset(
        context_source, cfg.dataset_name, rows=range(context_source.n_units)
    )
    params = infer_parameters(
        oracle,
        value_ctx,
        meta,
        family,
        batch_size=cfg.batch_size,
        retries=cfg.retries,
        transcript=transcript,
    )
    pp = PerUnitParams(family=family, params=params)
    raw_values = sample_confounder_values(pp, seed=_iteration_seed(cfg.seed, iteration))
    std = standardize_column(raw_values)
    record = GeneratedConfounder(
        name=meta.name,
        explanation=explanation,
        family=str(family),
        params_digest=_params_digest(params),
        values=raw_values,
        standardize_mean=std.mean,
        standardize_sd=std.sd,
    )
    return meta, std.values, record


def _failure_result(current, confounders, po, logs, pre, detail) -> "ProciResult":
    return ProciResult(
        augmented=current,
        confounders=tuple(confounders),
        potential_outcomes=po,
        iteration_log=tuple(logs),
        termination="oracle_failure",
        failure=detail,
        precheck=pre,
    )


def run_proci(
    ds: ObservationalDataset,
    cfg: ProciConfig,
    transcript: Transcript | None = None,
    precheck: bool = False,
) -> ProciResult:
    """Run the progressive procedure until the independence test passes.

    The first passing iteration terminates the loop; iterations 1..k-1 are
    guaranteed failures by construction. On oracle failure the partially
    appended column is rolled back, so the returned dataset is always
    internally consistent; all completed work is retained in the result.
    """
    oracle = resolve_oracle(cfg.oracle)
    current = ds
    confounders: list[GeneratedConfounder] = []
    logs: list[KcitResult] = []
    po: PotentialOutcomeTable | None = None
    pre: KcitResult | None = None

    if precheck:
        try:
            po = _impute_outcomes(current, oracle, cfg, transcript, has_generated=False)
        except OracleError as e:
            return _failure_result(current, [], None, [], None, f"precheck: {e}")
        pre = kcit_precheck(current, po, cfg.kcit)

    for k in range(1, cfg.max_iterations + 1):
        try:
            meta, column, record = generate_confounder(current, oracle, cfg, k, transcript)
            candidate = append_confounder(current, column, meta)
            po_candidate = _impute_outcomes(candidate, oracle, cfg, transcript, has_generated=True)
        except (OracleError, ValueError) as e:
            return _failure_result(current, confounders, po, logs, pre, f"iteration {k}: {e}")

        current = candidate
        po = po_candidate
        confounders.append(record)

        result = _run_kcit(current, po, cfg.kcit, k)
        logs.append(result)
        if result.passed:
            return ProciResult(
                augmented=current,
                confounders=tuple(confounders),
                potential_outcomes=po,
                iteration_log=tuple(logs),
                termination="passed",
                passed_iteration=k,
                precheck=pre,
            )

    return ProciResult(
        augmented=current,
        confounders=tuple(confounders),
        potential_outcomes=po,
        iteration_log=tuple(logs),
        termination="max_iterations_reached",
        precheck=pre,
    )


def run_proci_fixed_iterations(
    ds: ObservationalDataset,
    cfg: ProciConfig,
    k_fixed: int,
    transcript: Transcript | None = None,
) -> ProciResult:
    """Ablation without the independence gate: exactly k_fixed iterations.

    The generation and imputation flow is identical to :func:`run_proci`
    (same oracle call sequence, same seeds); only the per-iteration test is
    absent, so with the same oracle script and k_fixed equal to the gated
    run's chosen iteration the augmented data is identical.
    """
    if k_fixed < 1:
        raise ValueError("k_fixed must be at least 1")
    oracle = resolve_oracle(cfg.oracle)
    current = ds
    confounders: list[GeneratedConfounder] = []
    po: PotentialOutcomeTable | None = None
    for k in range(1, k_fixed + 1):
        try:
            meta, column, record = generate_confounder(current, oracle, cfg, k, transcript)
            candidate = append_confounder(current, column, meta)
            po = _impute_outcomes(candidate, oracle, cfg, transcript, has_generated=True)
        except (OracleError, ValueError) as e:
            return _failure_result(current, confounders, po, [], None, f"iteration {k}: {e}")
        current = candidate
        confounders.append(record)
    return ProciResult(
        augmented=current,
        confounders=tuple(confounders),
        potential_outcomes=po,
        iteration_log=(),
        termination="fixed_iterations",
        passed_iteration=None,
    )


def run_proci_all_at_once(
    ds: ObservationalDataset,
    cfg: ProciConfig,
    n_vars: int | None = None,
    transcript: Transcript | None = None,
) -> ProciResult:
    """Ablation without progressive context: all confounders in one shot.

    Every proposal sees only the original covariates (no stepwise context
    growth), then counterfactual imputation and a single independence test
    run once on the fully augmented set.
    """
    n_vars = n_vars if n_vars is not None else cfg.max_iterations
    oracle = resolve_oracle(cfg.oracle)
    current = ds
    confounders: list[GeneratedConfounder] = []
    for k in range(1, n_vars + 1):
        try:
            meta, column, record = generate_confounder(
                current, oracle, cfg, k, transcript, context_ds=ds
            )
            current = append_confounder(current, column, meta)
        except (OracleError, ValueError) as e:
            return _failure_result(current, confounders, None, [], None, f"proposal {k}: {e}")
        confounders.append(record)
    try:
        po = _impute_outcomes(current, oracle, cfg, transcript, has_generated=True)
    except OracleError as e:
        return _failure_result(current, confounders, None, [], None, f"imputation: {e}")
    result = _run_kcit(current, po, cfg.kcit, n_vars)
    return ProciResult(
        augmented=current,
        confounders=tuple(confounders),
        potential_outcomes=po,
        iteration_log=(result,),
        termination="passed" if result.passed else "max_iterations_reached",
        passed_iteration=n_vars if result.passed else None,
    )


def run_proci_direct_values(
    ds: ObservationalDataset,
    cfg: ProciConfig,
    transcript: Transcript | None = None,
) -> ProciResult:
    """Ablation without distributional reasoning: single-pass value prompts.

    The family/parameter phase is replaced by a direct per-unit value request
    (the failure mode this invites is collapsed, near-constant columns); the
    progressive gate itself stays in place.
    """
    from .oracle import impute_values_direct

    oracle = resolve_oracle(cfg.oracle)
    current = ds
    confounders: list[GeneratedConfounder] = []
    logs: list[KcitResult] = []
    po: PotentialOutcomeTable | None = None
    for k in range(1, cfg.max_iterations + 1):
        ctx = context_from_dataset(current, cfg.dataset_name)
        try:
            meta, explanation = propose_variable(
                oracle, ctx, retries=cfg.retries, transcript=transcript
            )
            value_ctx = context_from_dataset(
                current, cfg.dataset_name, rows=range(current.n_units)
            )
            raw_values = impute_values_direct(
                oracle,
                value_ctx,
                meta,
                batch_size=cfg.batch_size,
                retries=cfg.retries,
                transcript=transcript,
            )
            std = standardize_column(raw_values)
            candidate = append_confounder(current, std.values, meta)
            po_candidate = _impute_outcomes(candidate, oracle, cfg, transcript, has_generated=True)
        except (OracleError, ValueError) as e:
            return _failure_result(current, confounders, po, logs, None, f"iteration {k}: {e}")
        current = candidate
        po = po_candidate
        confounders.append(
            GeneratedConfounder(
                name=meta.name,
                explanation=explanation,
                family="direct",
                params_digest=_params_digest([tuple(raw_values.tolist())]),
                values=raw_values,
                standardize_mean=std.mean,
                standardize_sd=std.sd,
            )
        )
        result = _run_kcit(current, po, cfg.kcit, k)
        logs.append(result)
        if result.passed:
            return ProciResult(
                augmented=current,
                confounders=tuple(confounders),
                potential_outcomes=po,
                iteration_log=tuple(logs),
                termination="passed",
                passed_iteration=k,
            )
    return ProciResult(
        augmented=current,
        confounders=tuple(confounders),
        potential_outcomes=po,
        iteration_log=tuple(logs),
        termination="max_iterations_reached",
    )


def write_run_dir(result: ProciResult, out_dir, transcript: Transcript | None = None) -> None:
    """Serialize a loop run: augmented data, confounder records, test log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(result.augmented, out / "augmented.csv")
    (out / "confounders.json").write_text(
        json.dumps([c.to_dict() for c in result.confounders], indent=2, sort_keys=True)
    )
    if result.potential_outcomes is not None:
        write_po_table_csv(result.potential_outcomes, out / "po_table.csv")
    (out / "iterations.json").write_text(
        json.dumps(result.to_summary(), indent=2, sort_keys=True)
    )
    if transcript is not None:
        transcript.write_jsonl(out / "transcript.jsonl")
