"""Closed-form and matching estimators: ridge, logistic, S-learner, PSM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import ObservationalDataset


@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray
    intercept: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.intercept


def fit_ridge(x, y, penalty: float, intercept: bool = True) -> RidgeModel:
    """Minimize ||Xw - y||^2 + penalty ||w||^2 by the normal equations.

    The intercept, when present, is unpenalized (fit on centered data).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("x must be (n, d) and y length n")
    if penalty < 0:
        raise ValueError("penalty must be nonnegative")
    if intercept:
        x_mean = x.mean(axis=0)
        y_mean = float(y.mean())
        xc = x - x_mean
        yc = y - y_mean
    else:
        x_mean = np.zeros(x.shape[1])
        y_mean = 0.0
        xc, yc = x, y
    gram = xc.T @ xc + penalty * np.eye(x.shape[1])
    try:
        w = np.linalg.solve(gram, xc.T @ yc)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(
            f"singular normal equations (penalty={penalty}); add regularization"
        ) from e
    b = y_mean - float(x_mean @ w) if intercept else 0.0
    return RidgeModel(weights=w, intercept=b)


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.intercept

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        z = self.decision(x)
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out


def fit_logistic(x, t, penalty: float = 1e-6, max_iter: int = 100, tol: float = 1e-10) -> LogisticModel:
    """Newton optimization of the L2-penalized logistic log-likelihood.

    The intercept is unpenalized; with an intercept-only (or constant-feature)
    design the fitted propensity is exactly the empirical treated fraction.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if x.ndim != 2 or t.shape != (x.shape[0],):
        raise ValueError("x must be (n, d) and t length n")
    if not ((t == 0).any() and (t == 1).any()):
        raise ValueError("both treatment arms must be nonempty")
    n, d = x.shape
    design = np.column_stack([np.ones(n), x])
    beta = np.zeros(d + 1)
    pen = np.full(d + 1, penalty)
    pen[0] = 0.0
    for _ in range(max_iter):
        z = design @ beta
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        p[~pos] = ez / (1.0 + ez)
        grad = design.T @ (p - t) + pen * beta
        if np.linalg.norm(grad) < tol:
            break
        w = np.clip(p * (1.0 - p), 1e-12, None)
        hess = design.T @ (design * w[:, None]) + np.diag(pen + 1e-12)
        beta -= np.linalg.solve(hess, grad)
    else:
        raise RuntimeError(f"logistic fit did not converge in {max_iter} Newton steps")
    return LogisticModel(weights=beta[1:], intercept=float(beta[0]))


@dataclass(frozen=True)
class SLearnerModel:
    """Single ridge fit on [X, T]; the effect is f(x, 1) - f(x, 0)."""

    kind: str
    ridge: RidgeModel
    n_covariates: int

    def predict_cate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.n_covariates:
            raise ValueError(f"expected {self.n_covariates} covariates, got {x.shape[1]}")
        ones = np.ones(x.shape[0])
        return self.ridge.predict(np.column_stack([x, ones])) - self.ridge.predict(
            np.column_stack([x, np.zeros(x.shape[0])])
        )

    def predict_outcome(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.ridge.predict(np.column_stack([x, np.asarray(t, dtype=np.float64)]))


def fit_s_learner(ds: ObservationalDataset, ridge_penalty: float = 1e-6) -> SLearnerModel:
    design = np.column_stack([ds.covariates, ds.treatments.astype(np.float64)])
    model = fit_ridge(design, ds.outcomes, penalty=ridge_penalty)
    return SLearnerModel(kind="s-learner", ridge=model, n_covariates=ds.n_covariates)


_TIE_TOL = 1e-12


def nearest_by_logit(
    logit: float,
    candidate_logits: np.ndarray,
    point: np.ndarray | None = None,
    candidate_points: np.ndarray | None = None,
) -> int:
    """Index of the nearest candidate on the logit scale.

    Logit ties (within 1e-12) break by covariate distance when points are
    available, then by position; a degenerate propensity therefore still
    matches exact covariate twins.
    """
    dists = np.abs(candidate_logits - logit)
    dmin = float(dists.min())
    tied = np.flatnonzero(dists <= dmin + _TIE_TOL)
    if tied.shape[0] > 1 and point is not None and candidate_points is not None:
        cov_d = np.linalg.norm(candidate_points[tied] - point, axis=1)
        tied = tied[np.flatnonzero(cov_d <= cov_d.min() + _TIE_TOL)]
    return int(tied[0])


@dataclass(frozen=True)
class PsmModel:
    """1-NN propensity matching with replacement on the logit scale.

    Per-treated-unit effects are own outcome minus matched-control outcome;
    new points inherit the effect of the nearest treated unit in logit space.
    """

    kind: str
    propensity: LogisticModel
    treated_logits: np.ndarray
    treated_covariates: np.ndarray
    pair_effects: np.ndarray
    att: float
    overlap_violation: bool
    history: dict = field(default_factory=dict)

    def predict_cate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        logits = self.propensity.decision(x)
        out = np.empty(logits.shape[0])
        for i, v in enumerate(logits):
            j = nearest_by_logit(v, self.treated_logits, x[i], self.treated_covariates)
            out[i] = self.pair_effects[j]
        return out


def fit_psm(ds: ObservationalDataset, propensity_penalty: float = 1e-6) -> PsmModel:
    model = fit_logistic(ds.covariates, ds.treatments.astype(np.float64), penalty=propensity_penalty)
    logits = model.decision(ds.covariates)
    treated = np.flatnonzero(ds.treatments == 1)
    control = np.flatnonzero(ds.treatments == 0)
    effects = np.empty(treated.shape[0])
    for row, i in enumerate(treated):
        j = control[
            nearest_by_logit(
                logits[i], logits[control], ds.covariates[i], ds.covariates[control]
            )
        ]
        effects[row] = ds.outcomes[i] - ds.outcomes[j]
    overlap_violation = bool(
        logits[treated].min() > logits[control].max()
        or logits[treated].max() < logits[control].min()
    )
    return PsmModel(
        kind="psm",
        propensity=model,
        treated_logits=logits[treated].copy(),
        treated_covariates=ds.covariates[treated].copy(),
        pair_effects=effects,
        att=float(effects.mean()),
        overlap_violation=overlap_violation,
    )
