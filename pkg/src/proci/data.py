"""Dataset model, validation, splitting, and confounder augmentation.

All container types are immutable after construction: arrays are copied in
and marked read-only, and every operation returns a new object. Construction
is deliberately permissive (shape/dtype coercion only); invariant checking
lives in :func:`validate_dataset`, which reports rather than raises.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

VARIABLE_KINDS = ("covariate", "treatment", "outcome", "generated-confounder")


@dataclass(frozen=True)
class VariableMeta:
    """Name, human description, and role of one dataset variable."""

    name: str
    description: str
    kind: str

    def __post_init__(self):
        if self.kind not in VARIABLE_KINDS:
            raise ValueError(f"unknown variable kind {self.kind!r}")


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ObservationalDataset:
    """Covariate matrix, binary treatment, factual outcome, and variable metadata.

    Treatments are stored as integers in {0, 1}; fractional encodings are
    rejected at coercion time so propensity information can never leak
    through the treatment dtype.
    """

    covariates: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray
    meta: tuple[VariableMeta, ...]
    dataset_intro: str = ""

    def __post_init__(self):
        cov = np.array(self.covariates, dtype=np.float64)
        if cov.ndim != 2:
            raise ValueError(f"covariates must be 2-d, got ndim={cov.ndim}")
        t_raw = np.asarray(self.treatments)
        t = np.array(t_raw, dtype=np.int64)
        if t_raw.dtype.kind == "f" and not np.array_equal(
            t_raw[np.isfinite(t_raw)], t[np.isfinite(t_raw)]
        ):
            raise ValueError("treatments must be integer-coded 0/1, not fractional")
        y = np.array(self.outcomes, dtype=np.float64)
        for name, arr in (("covariates", cov), ("treatments", t), ("outcomes", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "meta", tuple(self.meta))

    @property
    def n_units(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def covariate_metas(self) -> tuple[VariableMeta, ...]:
        return tuple(m for m in self.meta if m.kind in ("covariate", "generated-confounder"))

    @property
    def treatment_meta(self) -> VariableMeta:
        return next(m for m in self.meta if m.kind == "treatment")

    @property
    def outcome_meta(self) -> VariableMeta:
        return next(m for m in self.meta if m.kind == "outcome")

    @property
    def generated_column_indices(self) -> tuple[int, ...]:
        return tuple(
            i for i, m in enumerate(self.covariate_metas) if m.kind == "generated-confounder"
        )


@dataclass(frozen=True)
class BenchmarkDataset:
    """Observational dataset plus ground truth needed for evaluation.

    ``true_y0``/``true_y1`` are None for compositions (Jobs-style) where only
    the randomized subset supports evaluation. ``hidden_columns`` records the
    positions (in the original, pre-masking design) of covariates withheld
    from ``base``; their values and metadata are retained so scripted oracles
    and robustness experiments can reveal them.
    """

    base: ObservationalDataset
    true_y0: np.ndarray | None
    true_y1: np.ndarray | None
    randomized_mask: np.ndarray
    hidden_columns: tuple[int, ...] = ()
    hidden_values: np.ndarray | None = None
    hidden_metas: tuple[VariableMeta, ...] = ()
    base_columns: tuple[int, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        mask = _frozen_array(self.randomized_mask, bool)
        object.__setattr__(self, "randomized_mask", mask)
        for name in ("true_y0", "true_y1"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _frozen_array(v, np.float64))
        if self.hidden_values is not None:
            hv = np.array(self.hidden_values, dtype=np.float64)
            if hv.ndim == 1:
                hv = hv[:, None]
            hv.setflags(write=False)
            object.__setattr__(self, "hidden_values", hv)
        object.__setattr__(self, "hidden_columns", tuple(self.hidden_columns))
        object.__setattr__(self, "hidden_metas", tuple(self.hidden_metas))
        base_cols = tuple(self.base_columns) or tuple(range(self.base.n_covariates))
        object.__setattr__(self, "base_columns", base_cols)

    @property
    def has_ground_truth(self) -> bool:
        return self.true_y0 is not None and self.true_y1 is not None


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test ratios and the seed of the deterministic shuffle."""

    ratios: tuple[float, float, float]
    seed: int

    def __post_init__(self):
        r = tuple(float(v) for v in self.ratios)
        if len(r) != 3 or any(v <= 0 for v in r):
            raise ValueError(f"ratios must be three positive reals, got {self.ratios}")
        if abs(sum(r) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got sum={sum(r)}")
        object.__setattr__(self, "ratios", r)
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class ValidationReport:
    """All invariant violations found in a dataset; empty iff valid."""

    issues: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.issues

    def __str__(self) -> str:
        return "valid dataset" if self.ok else "\n".join(self.issues)


def validate_dataset(ds: ObservationalDataset) -> ValidationReport:
    """Check every dataset invariant, reporting violations with coordinates.

    Never raises: a malformed dataset yields a report, an intact one an
    empty report.
    """
    issues: list[str] = []
    n, d = ds.covariates.shape
    if n < 2:
        issues.append(f"dataset has {n} rows; at least 2 required")
    if ds.treatments.shape != (n,):
        issues.append(
            f"length mismatch: treatments has shape {ds.treatments.shape}, expected ({n},)"
        )
    if ds.outcomes.shape != (n,):
        issues.append(
            f"length mismatch: outcomes has shape {ds.outcomes.shape}, expected ({n},)"
        )

    bad = np.argwhere(~np.isfinite(ds.covariates))
    for i, j in bad:
        issues.append(f"non-finite covariate at ({i}, {j})")
    if ds.outcomes.shape == (n,):
        for (i,) in np.argwhere(~np.isfinite(ds.outcomes)):
            issues.append(f"non-finite outcome at row {i}")

    values = set(np.unique(ds.treatments).tolist())
    if not values <= {0, 1}:
        issues.append(f"treatments contain values outside {{0,1}}: {sorted(values - {0, 1})}")
    elif ds.treatments.shape == (n,):
        if not (ds.treatments == 0).any():
            issues.append("empty control arm: all treatments are 1")
        if not (ds.treatments == 1).any():
            issues.append("empty treated arm: all treatments are 0")

    seen: dict[str, str] = {}
    for m in ds.meta:
        if not m.name:
            issues.append("variable with empty name")
            continue
        low = m.name.lower()
        if low in seen:
            issues.append(f"duplicate variable name {m.name!r}")
        seen[low] = m.name
        if m.kind == "generated-confounder" and not m.description.strip():
            issues.append(f"generated confounder {m.name!r} lacks an explanation")

    n_cov_meta = len(ds.covariate_metas)
    if n_cov_meta != d:
        issues.append(f"{n_cov_meta} covariate metadata entries for {d} columns")
    for role in ("treatment", "outcome"):
        count = sum(1 for m in ds.meta if m.kind == role)
        if count != 1:
            issues.append(f"expected exactly one {role} variable, found {count}")

    return ValidationReport(tuple(issues))


def _row_sort_keys(ds: ObservationalDataset, seed: int) -> np.ndarray:
    """Keyed hash of each row's content; basis of the identity-stable shuffle."""
    key = int(seed).to_bytes(8, "little", signed=False)
    out = np.empty(ds.n_units, dtype=np.uint64)
    cov = np.ascontiguousarray(ds.covariates)
    for i in range(ds.n_units):
        h = hashlib.blake2b(digest_size=8, key=key)
        h.update(cov[i].tobytes())
        h.update(int(ds.treatments[i]).to_bytes(1, "little"))
        h.update(np.float64(ds.outcomes[i]).tobytes())
        out[i] = int.from_bytes(h.digest(), "little")
    return out


def take_rows(ds: ObservationalDataset, indices: Sequence[int]) -> ObservationalDataset:
    """New dataset holding the given rows, in the given order."""
    idx = np.asarray(indices, dtype=np.int64)
    return replace(
        ds,
        covariates=ds.covariates[idx],
        treatments=ds.treatments[idx],
        outcomes=ds.outcomes[idx],
    )


def split_indices(ds: ObservationalDataset, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row indices of the train/val/test partition.

    Rows are ordered by a seeded hash of their content, so the partition is a
    function of (row multiset, seed) and survives any reordering of the input.
    Split sizes are floor(ratio * n) with the remainder assigned to train.
    """
    n = ds.n_units
    if n < 10:
        raise ValueError(f"need at least 10 rows to split, got {n}")
    n_val = int(np.floor(spec.ratios[1] * n))
    n_test = int(np.floor(spec.ratios[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(
            f"ratios {spec.ratios} leave an empty split at n={n} "
            f"(train={n_train}, val={n_val}, test={n_test})"
        )
    order = np.argsort(_row_sort_keys(ds, spec.seed), kind="stable")
    return (
        order[:n_train],
        order[n_train : n_train + n_val],
        order[n_train + n_val :],
    )


def split_dataset(
    ds: ObservationalDataset, spec: SplitSpec
) -> tuple[ObservationalDataset, ObservationalDataset, ObservationalDataset]:
    """Deterministic, disjoint, exhaustive train/val/test partition."""
    tr, va, te = split_indices(ds, spec)
    return take_rows(ds, tr), take_rows(ds, va), take_rows(ds, te)


def append_confounder(
    ds: ObservationalDataset, values: Sequence[float], meta: VariableMeta
) -> ObservationalDataset:
    """Append one generated-confounder column as the new rightmost covariate.

    The input dataset is untouched; generated columns always sit to the right
    of observed ones so provenance stays recoverable by column index.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.shape != (ds.n_units,):
        raise ValueError(
            f"confounder values have shape {vals.shape}, expected ({ds.n_units},)"
        )
    if not np.all(np.isfinite(vals)):
        raise ValueError("confounder values must be finite")
    if meta.kind != "generated-confounder":
        raise ValueError(f"appended column must have kind generated-confounder, got {meta.kind!r}")
    existing = {m.name.lower() for m in ds.meta}
    if meta.name.lower() in existing:
        raise ValueError(f"variable name {meta.name!r} already present")
    return replace(
        ds,
        covariates=np.column_stack([ds.covariates, vals]),
        meta=ds.meta + (meta,),
    )


def drop_last_confounder(ds: ObservationalDataset) -> ObservationalDataset:
    """Inverse of :func:`append_confounder`; used for rollback on failure."""
    metas = ds.covariate_metas
    if not metas or metas[-1].kind != "generated-confounder":
        raise ValueError("rightmost column is not a generated confounder")
    return replace(
        ds,
        covariates=ds.covariates[:, :-1],
        meta=tuple(m for m in ds.meta if m is not metas[-1]),
    )


# ---------------------------------------------------------------------------
# CSV ingestion and sidecar metadata
# ---------------------------------------------------------------------------

def load_metadata_sidecar(path: str | Path) -> tuple[str, dict[str, str]]:
    """Read the JSON sidecar: dataset introduction and per-variable descriptions."""
    doc = json.loads(Path(path).read_text())
    intro = str(doc.get("dataset_intro", ""))
    variables = {str(k): str(v) for k, v in doc.get("variables", {}).items()}
    return intro, variables


def load_dataset_csv(
    path: str | Path,
    treatment_column: str,
    outcome_column: str,
    sidecar: str | Path | None = None,
) -> ObservationalDataset:
    """Load a dataset from a headered CSV.

    One column holds the treatment, one the outcome, the rest are covariates.
    Missing or non-numeric cells reject the whole file; decimal point is '.',
    delimiter ','.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise ValueError(f"{path}: duplicate column names in header")
        for required in (treatment_column, outcome_column):
            if required not in header:
                raise ValueError(f"{path}: missing required column {required!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            parsed = []
            for col, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    raise ValueError(f"{path}:{lineno}: missing value in column {col!r}")
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: non-numeric value {cell!r} in column {col!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(table)):
        raise ValueError(f"{path}: non-finite values present")

    t_idx = header.index(treatment_column)
    y_idx = header.index(outcome_column)
    cov_idx = [i for i in range(len(header)) if i not in (t_idx, y_idx)]

    t = table[:, t_idx]
    if not np.all(np.isin(t, (0.0, 1.0))):
        raise ValueError(f"{path}: treatment column {treatment_column!r} must be 0/1")

    intro, descriptions = ("", {})
    if sidecar is not None:
        intro, descriptions = load_metadata_sidecar(sidecar)

    meta = [
        VariableMeta(header[i], descriptions.get(header[i], ""), "covariate") for i in cov_idx
    ]
    meta.append(
        VariableMeta(treatment_column, descriptions.get(treatment_column, ""), "treatment")
    )
    meta.append(VariableMeta(outcome_column, descriptions.get(outcome_column, ""), "outcome"))

    return ObservationalDataset(
        covariates=table[:, cov_idx],
        treatments=t.astype(np.int64),
        outcomes=table[:, y_idx],
        meta=tuple(meta),
        dataset_intro=intro,
    )


def write_dataset_csv(ds: ObservationalDataset, path: str | Path) -> None:
    """Write a dataset in the same schema :func:`load_dataset_csv` reads."""
    path = Path(path)
    names = [m.name for m in ds.covariate_metas]
    header = names + [ds.treatment_meta.name, ds.outcome_meta.name]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n_units):
            row = [repr(float(v)) for v in ds.covariates[i]]
            row.append(str(int(ds.treatments[i])))
            row.append(repr(float(ds.outcomes[i])))
            writer.writerow(row)


def default_metas(
    covariate_names: Iterable[str],
    treatment: tuple[str, str] = ("treatment", "Binary treatment indicator."),
    outcome: tuple[str, str] = ("outcome", "Observed outcome."),
    covariate_descriptions: dict[str, str] | None = None,
) -> tuple[VariableMeta, ...]:
    """Convenience metadata builder for generators and tests."""
    desc = covariate_descriptions or {}
    metas = [
        VariableMeta(name, desc.get(name, f"Observed covariate {name}."), "covariate")
        for name in covariate_names
    ]
    metas.append(VariableMeta(treatment[0], treatment[1], "treatment"))
    metas.append(VariableMeta(outcome[0], outcome[1], "outcome"))
    return tuple(metas)
