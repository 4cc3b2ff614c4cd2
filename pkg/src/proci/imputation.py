"""Turning oracle output into data: confounder sampling and outcome tables."""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass


@dataclass(frozen=True)
class DistributionFamily:
    """Supported per-unit sampling families: gaussian, bernoulli, categorical."""

    tag: str
    levels: int | None = None

    def __post_init__(self):
        if self.tag not in ("gaussian", "bernoulli", "categorical"):
            raise ValueError(f"unsupported distribution family {self.tag!r}")
        if self.tag == "categorical":
            if self.levels is None or self.levels < 2:
                raise ValueError("categorical family needs at least 2 levels")
        elif self.levels is not None:
            raise ValueError(f"{self.tag} family takes no level count")

    def __str__(self) -> str:
        return self.tag if self.levels is None else f"{self.tag}({self.levels})"


GAUSSIAN = DistributionFamily("gaussian")
BERNOULLI = DistributionFamily("bernoulli")


@dataclass(frozen=True)
class PerUnitParams:
    """One distribution parameter tuple per unit, all from the same family."""

    family: DistributionFamily
    params: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "params", tuple(tuple(float(v) for v in row) for row in self.params)
        )
        for i, row in enumerate(self.params):
            if any(not np.isfinite(v) for v in row):
                raise ValueError(f"non-finite parameter for unit {i}")
            if self.family.tag == "gaussian":
                if len(row) != 2:
                    raise ValueError(f"unit {i}: gaussian parameters must be (mean, sd)")
                if not row[1] > 0:
                    raise ValueError(f"unit {i}: standard deviation must be positive")
            elif self.family.tag == "bernoulli":
                if len(row) != 1 or not 0.0 <= row[0] <= 1.0:
                    raise ValueError(f"unit {i}: bernoulli parameter must be one p in [0, 1]")
            else:
                if len(row) != self.family.levels:
                    raise ValueError(
                        f"unit {i}: expected {self.family.levels} category probabilities"
                    )
                if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-6:
                    raise ValueError(f"unit {i}: category probabilities must sum to 1")

    @property
    def n_units(self) -> int:
        return len(self.params)


def sample_confounder_values(pp: PerUnitParams, seed: int) -> np.ndarray:
    """One independent draw per unit from its personal distribution.

    Unit i's stream derives from (seed, i), so taking a row subset never
    shifts the draws of the remaining units. Bernoulli and categorical
    samples are emitted as integer-coded floats.
    """
    out = np.empty(pp.n_units, dtype=np.float64)
    for i, theta in enumerate(pp.params):
        rng = np.random.default_rng([seed, i])
        if pp.family.tag == "gaussian":
            mu, sd = theta
            out[i] = mu + sd * rng.standard_normal()
        elif pp.family.tag == "bernoulli":
            p = theta[0]
            if p == 0.0 or p == 1.0:
                out[i] = p
            else:
                out[i] = float(rng.random() < p)
        else:
            u = rng.random()
            out[i] = float(np.searchsorted(np.cumsum(theta), u, side="right"))
    return out


@dataclass(frozen=True)
class PotentialOutcomeTable:
    """Per-unit (y0_hat, y1_hat) with the factual arm recorded.

    Exactly one arm per unit is factual and carries the observed outcome
    unchanged; the other arm holds the imputed counterfactual.
    """

    y0_hat: np.ndarray
    y1_hat: np.ndarray
    factual_arm: np.ndarray

    def __post_init__(self):
        y0 = np.array(self.y0_hat, dtype=np.float64)
        y1 = np.array(self.y1_hat, dtype=np.float64)
        arm = np.array(self.factual_arm, dtype=np.int64)
        if not (y0.shape == y1.shape == arm.shape) or y0.ndim != 1:
            raise ValueError("potential-outcome columns must be equal-length vectors")
        if not set(np.unique(arm).tolist()) <= {0, 1}:
            raise ValueError("factual_arm must be 0/1")
        for name, arr in (("y0_hat", y0), ("y1_hat", y1), ("factual_arm", arm)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_units(self) -> int:
        return self.y0_hat.shape[0]

    def factual(self) -> np.ndarray:
        return np.where(self.factual_arm == 1, self.y1_hat, self.y0_hat)

    def stacked(self) -> np.ndarray:
        """Two-column block (y0_hat, y1_hat) as fed to the independence test."""
        return np.column_stack([self.y0_hat, self.y1_hat])


def construct_potential_outcomes(t, y, y_cf) -> PotentialOutcomeTable:
    """Merge factual outcomes with imputed counterfactuals.

    y0_hat gets the observed outcome for control units and the counterfactual
    for treated units; y1_hat the reverse. Factual values are copied, not
    recomputed.
    """
    t = np.asarray(t)
    y = np.asarray(y, dtype=np.float64)
    y_cf = np.asarray(y_cf, dtype=np.float64)
    if not (t.shape == y.shape == y_cf.shape) or t.ndim != 1:
        raise ValueError("t, y, y_cf must be equal-length vectors")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(y_cf))):
        raise ValueError("outcomes and counterfactuals must be finite")
    y0 = np.where(t == 1, y_cf, y)
    y1 = np.where(t == 1, y, y_cf)
    return PotentialOutcomeTable(y0_hat=y0, y1_hat=y1, factual_arm=t.astype(np.int64))


def write_po_table_csv(table: PotentialOutcomeTable, path) -> None:
    import csv
    from pathlib import Path

    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y0_hat", "y1_hat", "factual_arm"])
        for i in range(table.n_units):
            writer.writerow(
                [repr(float(table.y0_hat[i])), repr(float(table.y1_hat[i])), int(table.factual_arm[i])]
            )


@dataclass(frozen=True)
class StandardizedColumn:
    values: np.ndarray
    mean: float
    sd: float
    degenerate: bool


def standardize_column(values) -> StandardizedColumn:
    """Zero-mean unit-variance rescaling with population sd.

    A constant column comes back as zeros with sd reported as 0 and the
    degeneracy flag set.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 2:
        raise ValueError("need a vector of at least 2 values")
    mean = float(v.mean())
    sd = float(v.std())
    if sd == 0.0:
        return StandardizedColumn(np.zeros_like(v), mean, 0.0, True)
    return StandardizedColumn((v - mean) / sd, mean, sd, False)
