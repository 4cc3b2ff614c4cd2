"""Evaluation formulas for effect estimates.

Conventions pinned here: the heterogeneous-effect error is the mean of
squared effect residuals without a square root (a reporting helper can take
the root); the policy assigns treatment only on a strictly positive
estimated effect; the treated-effect error and policy risk are evaluated on
the randomized subset, and an intersected policy cell that is empty while
its weight is positive is a hard error rather than a fabricated zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BenchmarkDataset


@dataclass(frozen=True)
class EffectEstimates:
    """Per-unit effect estimates, optionally with both outcome surfaces."""

    tau_hat: np.ndarray
    y0_hat: np.ndarray | None = None
    y1_hat: np.ndarray | None = None

    def __post_init__(self):
        tau = np.array(self.tau_hat, dtype=np.float64)
        tau.setflags(write=False)
        object.__setattr__(self, "tau_hat", tau)
        if (self.y0_hat is None) != (self.y1_hat is None):
            raise ValueError("provide both outcome surfaces or neither")
        if self.y0_hat is not None:
            y0 = np.array(self.y0_hat, dtype=np.float64)
            y1 = np.array(self.y1_hat, dtype=np.float64)
            if y0.shape != tau.shape or y1.shape != tau.shape:
                raise ValueError("outcome surfaces must match tau_hat in length")
            if np.max(np.abs((y1 - y0) - tau)) > 1e-10:
                raise ValueError("tau_hat must equal y1_hat - y0_hat")
            for name, arr in (("y0_hat", y0), ("y1_hat", y1)):
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def n_units(self) -> int:
        return self.tau_hat.shape[0]

    def subset(self, indices) -> "EffectEstimates":
        idx = np.asarray(indices)
        return EffectEstimates(
            tau_hat=self.tau_hat[idx],
            y0_hat=None if self.y0_hat is None else self.y0_hat[idx],
            y1_hat=None if self.y1_hat is None else self.y1_hat[idx],
        )


def policy_decision(est: EffectEstimates) -> np.ndarray:
    """pi_i = 1 iff the estimated effect is strictly positive."""
    return (est.tau_hat > 0).astype(np.int64)


def _check_lengths(*arrays):
    n = len(arrays[0])
    for a in arrays[1:]:
        if len(a) != n:
            raise ValueError("length mismatch between ground truth and estimates")


def pehe(true_y0, true_y1, est: EffectEstimates) -> float:
    """Mean squared difference between true and estimated unit effects."""
    true_y0 = np.asarray(true_y0, dtype=np.float64)
    true_y1 = np.asarray(true_y1, dtype=np.float64)
    _check_lengths(true_y0, true_y1, est.tau_hat)
    return float(np.mean(((true_y1 - true_y0) - est.tau_hat) ** 2))


def ate_error(true_y0, true_y1, est: EffectEstimates) -> float:
    """Absolute difference between mean true effect and mean estimated effect."""
    true_y0 = np.asarray(true_y0, dtype=np.float64)
    true_y1 = np.asarray(true_y1, dtype=np.float64)
    _check_lengths(true_y0, true_y1, est.tau_hat)
    return float(abs(np.mean(true_y1 - true_y0) - np.mean(est.tau_hat)))


def att_error(ds: BenchmarkDataset, est: EffectEstimates) -> float:
    """Treated-effect error over the randomized treated units.

    The reference value is the mean true per-unit effect when ground truth is
    available; otherwise it is the randomized-arms mean difference, which is
    how a composition without counterfactuals defines its treated effect.
    """
    _check_lengths(ds.base.treatments, est.tau_hat)
    e_mask = ds.randomized_mask
    treated = e_mask & (ds.base.treatments == 1)
    if not treated.any():
        raise ValueError("no randomized treated units")
    att_est = float(est.tau_hat[treated].mean())
    if ds.has_ground_truth:
        att_true = float((ds.true_y1[treated] - ds.true_y0[treated]).mean())
    else:
        control = e_mask & (ds.base.treatments == 0)
        if not control.any():
            raise ValueError("no randomized control units")
        att_true = float(
            ds.base.outcomes[treated].mean() - ds.base.outcomes[control].mean()
        )
    return abs(att_true - att_est)


def policy_risk(ds: BenchmarkDataset, est: EffectEstimates) -> float:
    """Risk of the estimated decision policy on the randomized subset.

    R = 1 - ( mean(y over A1 & T1 & E) * |A1 & E| / |E|
            + mean(y over A0 & T0 & E) * |A0 & E| / |E| )

    with A1/A0 the policy arms, T1/T0 the factual arms, E the randomized
    subset. A cell mean that is needed (positive weight) but empty raises.
    """
    _check_lengths(ds.base.treatments, est.tau_hat)
    e_mask = ds.randomized_mask
    if not e_mask.any():
        raise ValueError("empty randomized subset")
    pi = policy_decision(est)
    y = ds.base.outcomes
    t = ds.base.treatments
    n_e = int(e_mask.sum())

    total = 0.0
    for arm, pi_value in ((1, 1), (0, 0)):
        in_policy = e_mask & (pi == pi_value)
        weight = int(in_policy.sum()) / n_e
        if weight == 0.0:
            continue
        cell = in_policy & (t == arm)
        if not cell.any():
            raise ValueError(
                f"undefined cell mean: policy arm {pi_value} has weight {weight:.3f} "
                f"but no factual arm-{arm} units in the randomized subset"
            )
        total += float(y[cell].mean()) * weight
    return 1.0 - total


def sqrt_pehe(true_y0, true_y1, est: EffectEstimates) -> float:
    """Root of :func:`pehe`, for reporting alongside the canonical value."""
    return float(np.sqrt(pehe(true_y0, true_y1, est)))


def metric_report(
    ds: BenchmarkDataset, est: EffectEstimates, include_sqrt_pehe: bool = False
) -> dict[str, float]:
    """All metrics that are well-defined for this dataset, as a flat dict."""
    out: dict[str, float] = {}
    if ds.has_ground_truth:
        out["pehe"] = pehe(ds.true_y0, ds.true_y1, est)
        out["ate_error"] = ate_error(ds.true_y0, ds.true_y1, est)
        if include_sqrt_pehe:
            out["sqrt_pehe"] = sqrt_pehe(ds.true_y0, ds.true_y1, est)
    if ds.randomized_mask.any():
        if (ds.randomized_mask & (ds.base.treatments == 1)).any():
            out["att_error"] = att_error(ds, est)
        out["policy_risk"] = policy_risk(ds, est)
    return out
