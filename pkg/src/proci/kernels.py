"""Kernel matrices, the conditional-independence test, and a CMI estimator.

The test statistic is the normalized trace of a regularized partial
cross-covariance operator built from centered RBF kernel matrices:

    stat = (1/n) * Tr( Ky@Kt - Ky@Kz @ (Kz@Kz/n + gamma*I)^-1 @ Kz@Kt / n )

with Ky, Kt, Kz centered. The constant factors are one fixed convention
(pinned by a naive-loop oracle in the test suite); any such constant cancels
in the resampling p-value. P-values come from a conditional randomization
scheme that preserves the dependence of the treatment on the conditioning
block: a kernel-ridge fit of T on Z estimates per-unit treatment
probabilities, and null treatment vectors are independent Bernoulli redraws
from those probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma


@dataclass(frozen=True)
class KernelMatrix:
    """A symmetric PSD kernel matrix, optionally double-centered.

    Symmetry and (for centered matrices) vanishing row sums are validated at
    construction; the PSD spectrum is asserted in the property tests rather
    than per instance, since an eigendecomposition per kernel would dominate
    the statistic's cost.
    """

    values: np.ndarray
    centered: bool
    bandwidth: float

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("kernel matrix must be square")
        if v.size and float(np.max(np.abs(v - v.T))) > 1e-12:
            raise ValueError("kernel matrix must be symmetric within 1e-12")
        if self.centered and v.size and float(np.max(np.abs(v.sum(axis=0)))) > 1e-8:
            raise ValueError("centered kernel must have vanishing row sums")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class KcitConfig:
    """Bandwidth rule, ridge regularizer, significance level, permutations."""

    bandwidth_rule: str | float = "median"
    gamma: float = 1e-3
    alpha: float = 0.05
    n_permutations: int = 199
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.bandwidth_rule, str):
            if self.bandwidth_rule not in ("median", "median-heuristic"):
                raise ValueError(f"unknown bandwidth rule {self.bandwidth_rule!r}")
            object.__setattr__(self, "bandwidth_rule", "median")
        elif not self.bandwidth_rule > 0:
            raise ValueError("fixed bandwidth must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_permutations < 99:
            raise ValueError("need at least 99 permutations")


@dataclass(frozen=True)
class KcitResult:
    statistic: float
    p_value: float
    passed: bool
    null_statistics: np.ndarray = field(repr=False)

    def __post_init__(self):
        ns = np.array(self.null_statistics, dtype=np.float64)
        ns.setflags(write=False)
        object.__setattr__(self, "null_statistics", ns)

    def to_dict(self) -> dict:
        return {
            "statistic": float(self.statistic),
            "p_value": float(self.p_value),
            "passed": bool(self.passed),
            "n_permutations": int(self.null_statistics.size),
        }


def _as_block(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected a vector or matrix, got ndim={arr.ndim}")
    return arr


def _pairwise_sq_dists(rows: np.ndarray) -> np.ndarray:
    sq = np.sum(rows * rows, axis=1, keepdims=True)
    d2 = sq + sq.T - 2.0 * (rows @ rows.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def median_heuristic_bandwidth(rows) -> float:
    """Median of pairwise Euclidean distances, zero distances excluded.

    Duplicated rows therefore do not drag the bandwidth toward zero; a fully
    degenerate input (all rows identical) is an error.
    """
    rows = _as_block(rows)
    if rows.shape[0] < 2:
        raise ValueError("need at least two rows")
    d2 = _pairwise_sq_dists(rows)
    iu = np.triu_indices(rows.shape[0], k=1)
    dists = np.sqrt(d2[iu])
    dists = dists[dists > 0]
    if dists.size == 0:
        raise ValueError("all rows identical: degenerate bandwidth")
    return float(np.median(dists))


def rbf_kernel_matrix(rows, bandwidth: float) -> KernelMatrix:
    """Gaussian RBF kernel K_ij = exp(-||x_i - x_j||^2 / (2 sigma^2))."""
    rows = _as_block(rows)
    if not np.all(np.isfinite(rows)):
        raise ValueError("non-finite input rows")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    d2 = _pairwise_sq_dists(rows)
    k = np.exp(-d2 / (2.0 * bandwidth * bandwidth))
    np.fill_diagonal(k, 1.0)
    return KernelMatrix(values=k, centered=False, bandwidth=float(bandwidth))


def _center_values(k: np.ndarray) -> np.ndarray:
    # HKH with H = I - J/n, expanded to avoid forming H
    row_mean = k.mean(axis=1, keepdims=True)
    col_mean = k.mean(axis=0, keepdims=True)
    grand = k.mean()
    return k - row_mean - col_mean + grand


def center_kernel(km: KernelMatrix) -> KernelMatrix:
    """Double-center: K~ = HKH, H = I - (1/n) 11'. Idempotent."""
    if km.centered:
        raise ValueError("kernel matrix already centered")
    return KernelMatrix(values=_center_values(km.values), centered=True, bandwidth=km.bandwidth)


def cross_covariance_trace(ka: KernelMatrix, kb: KernelMatrix) -> float:
    """(1/n) Tr(Ka Kb) for two centered kernels on the same units."""
    if not (ka.centered and kb.centered):
        raise ValueError("cross_covariance_trace requires centered kernels")
    if ka.n != kb.n:
        raise ValueError(f"size mismatch: {ka.n} vs {kb.n}")
    return float(np.sum(ka.values * kb.values.T) / ka.n)


def conditional_operator(
    ky: KernelMatrix, kt: KernelMatrix, kz: KernelMatrix | None, gamma: float
) -> np.ndarray:
    """Matrix whose normalized trace is the conditional-dependence statistic.

    With centered kernels Ky, Kt, Kz:

        M = Ky@Kt - Ky@Kz @ (Kz@Kz/n + gamma*I)^-1 @ Kz@Kt / n

    A None (or empty) conditioning kernel drops the second term.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    for km in (ky, kt) + (() if kz is None else (kz,)):
        if not km.centered:
            raise ValueError("conditional_operator requires centered kernels")
        if km.n != ky.n:
            raise ValueError("kernel size mismatch")
    n = ky.n
    m = ky.values @ kt.values
    if kz is None:
        return m
    z = kz.values
    system = z @ z / n + gamma * np.eye(n)
    correction = ky.values @ z @ np.linalg.solve(system, z @ kt.values) / n
    return m - correction


def _resolve_bandwidth(block: np.ndarray, rule: str | float) -> float:
    if isinstance(rule, str):
        return median_heuristic_bandwidth(block)
    return float(rule)


def _block_bandwidth(block: np.ndarray, rule: str | float) -> float:
    """Bandwidth for one test block; a constant block gets a placeholder.

    With all rows identical every pairwise distance is zero, so the kernel is
    the all-ones matrix for any bandwidth and centering annihilates it; the
    statistic contribution is exactly zero rather than an error.
    """
    try:
        return _resolve_bandwidth(block, rule)
    except ValueError:
        return 1.0


def _kcit_blocks(y, t, z, cfg: KcitConfig):
    """Validate inputs and build the centered kernels for each block."""
    yb = _as_block(y)
    tb = _as_block(np.asarray(t, dtype=np.float64))
    n = yb.shape[0]
    if n < 5:
        raise ValueError(f"need at least 5 units, got {n}")
    if tb.shape[0] != n:
        raise ValueError("treatment length mismatch")
    zb = None
    if z is not None:
        zb = _as_block(z)
        if zb.shape[1] == 0:
            zb = None
        elif zb.shape[0] != n:
            raise ValueError("conditioning block length mismatch")
    ky = center_kernel(rbf_kernel_matrix(yb, _block_bandwidth(yb, cfg.bandwidth_rule)))
    kt = center_kernel(rbf_kernel_matrix(tb, _block_bandwidth(tb, cfg.bandwidth_rule)))
    kz = None
    if zb is not None:
        kz = center_kernel(rbf_kernel_matrix(zb, _block_bandwidth(zb, cfg.bandwidth_rule)))
    return yb, tb, zb, ky, kt, kz


def kcit_statistic(y, t, z, cfg: KcitConfig) -> float:
    """Conditional-dependence statistic for (y, t) given z.

    ``y`` is typically the two-column block of imputed potential outcomes,
    ``t`` the binary treatment, ``z`` the (possibly augmented) covariates;
    ``z`` may be None or zero-width for an unconditional test. The value is
    nonnegative in all but near-degenerate cases; when the conditioning block
    explains the treatment almost completely, the regularized correction can
    push the trace slightly below zero. No clipping is applied: the
    resampling p-value compares observed and null draws on the same scale,
    so the sign convention cancels.
    """
    _, _, _, ky, kt, kz = _kcit_blocks(y, t, z, cfg)
    m = conditional_operator(ky, kt, kz, cfg.gamma)
    return float(np.trace(m) / ky.n)


def _reduced_operator(ky: KernelMatrix, kz: KernelMatrix | None, gamma: float) -> np.ndarray:
    """C~ = H C H with C = Ky - Ky@Kz@(Kz@Kz/n + gamma I)^-1 @ Kz / n.

    For any treatment kernel Kt (uncentered), Tr(M Kt~) = Tr(C~ Kt), which
    lets the resampling loop reuse one matrix across null treatment draws.
    """
    n = ky.n
    c = ky.values.copy()
    if kz is not None:
        z = kz.values
        system = z @ z / n + gamma * np.eye(n)
        c -= ky.values @ z @ np.linalg.solve(system, z) / n
    return _center_values(c)


def _statistic_from_reduced(c_tilde: np.ndarray, t: np.ndarray, bandwidth_t: float) -> float:
    """Statistic via the binary structure of the treatment kernel.

    K_T = off + (1-off) * [t_i == t_j] with off = exp(-1/(2 sigma_T^2)); since
    C~ has zero row/column sums, only the same-arm quadratic forms survive:
    stat = 2 (1-off) e1' C~ e1 / n with e1 the treated indicator.
    """
    n = t.shape[0]
    off = np.exp(-1.0 / (2.0 * bandwidth_t * bandwidth_t))
    idx1 = np.flatnonzero(t == 1)
    quad = float(c_tilde[np.ix_(idx1, idx1)].sum())
    return 2.0 * (1.0 - off) * quad / n


def _fit_propensity(t: np.ndarray, zb: np.ndarray | None, gamma: float, rule) -> np.ndarray:
    """Leave-one-out kernel-ridge fit of T on Z, clipped into (0, 1).

    Ridge scale is gamma * n so the fit smooths rather than interpolates, and
    the leave-one-out correction keeps unit i's own treatment out of its
    fitted value (a plain fit partially memorizes the realized assignment,
    which distorts the null draws). With no conditioning block the fit is the
    constant arm rate.
    """
    n = t.shape[0]
    if zb is None:
        return np.full(n, t.mean())
    kz = rbf_kernel_matrix(zb, _block_bandwidth(zb, rule)).values
    smoother = kz @ np.linalg.inv(kz + gamma * n * np.eye(n))
    tc = t - t.mean()
    fitted = smoother @ tc
    diag = np.clip(np.diag(smoother), None, 1.0 - 1e-10)
    loo = t.mean() + (fitted - diag * tc) / (1.0 - diag)
    return np.clip(loo, 1e-3, 1.0 - 1e-3)


def _redraw_treatment(propensity: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One null treatment vector: independent Bernoulli draws, both arms kept."""
    for _ in range(1000):
        t_star = (rng.random(propensity.shape[0]) < propensity).astype(np.float64)
        s = t_star.sum()
        if 0 < s < t_star.shape[0]:
            return t_star
    raise RuntimeError("could not draw a non-degenerate null treatment vector")


def kcit_pvalue(y, t, z, cfg: KcitConfig) -> KcitResult:
    """Resampling p-value for conditional independence of (y, t) given z.

    Null draws keep the T|Z relationship: a kernel-ridge propensity fit of T
    on Z (leave-one-out, regularizer gamma * n) supplies per-unit treatment
    probabilities, and each null treatment vector is an independent Bernoulli
    redraw from them, so the conditional law of T given the conditioning
    block is preserved while any extra dependence on y is broken. Each
    resample's stream derives from (seed, draw index), so results do not
    depend on evaluation order.
    """
    yb, tb, zb, ky, kt, kz = _kcit_blocks(y, t, z, cfg)
    t_vec = tb[:, 0]
    if not np.all(np.isin(t_vec, (0.0, 1.0))):
        raise ValueError("treatment must be binary 0/1")
    n1 = int(t_vec.sum())
    if n1 == 0 or n1 == t_vec.shape[0]:
        raise ValueError("one treatment arm is empty")

    c_tilde = _reduced_operator(ky, kz, cfg.gamma)
    observed = _statistic_from_reduced(c_tilde, t_vec, kt.bandwidth)

    propensity = _fit_propensity(t_vec, zb, cfg.gamma, cfg.bandwidth_rule)

    nulls = np.empty(cfg.n_permutations)
    for b in range(cfg.n_permutations):
        rng = np.random.default_rng([cfg.seed, b])
        t_star = _redraw_treatment(propensity, rng)
        nulls[b] = _statistic_from_reduced(c_tilde, t_star, kt.bandwidth)

    p = (1.0 + float(np.sum(nulls >= observed))) / (1.0 + cfg.n_permutations)
    return KcitResult(
        statistic=observed,
        p_value=p,
        passed=p > cfg.alpha,
        null_statistics=nulls,
    )


@dataclass(frozen=True)
class ConvergenceTable:
    """Median statistic displacement per imputation-noise level."""

    clean_statistic: float
    noise_levels: tuple[float, ...]
    medians: tuple[float, ...]

    def median_for(self, eta: float) -> float:
        return self.medians[self.noise_levels.index(eta)]


def imputation_noise_stability(
    clean: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    noise_levels: Sequence[float],
    cfg: KcitConfig,
    n_reps: int = 20,
) -> ConvergenceTable:
    """Statistic displacement when (Y0, Y1, U) carry simulated imputation noise.

    For each noise level the potential outcomes and the confounder are
    perturbed with independent Gaussian noise of that scale, the statistic is
    recomputed, and the median absolute displacement from the clean statistic
    over ``n_reps`` repetitions is recorded.
    """
    y0, y1, t, x, u = (np.asarray(v, dtype=np.float64) for v in clean)
    u2 = u[:, None] if u.ndim == 1 else u
    x2 = _as_block(x)
    n = y0.shape[0]
    z_clean = np.column_stack([x2, u2])
    stat_clean = kcit_statistic(np.column_stack([y0, y1]), t, z_clean, cfg)

    medians = []
    for level_idx, eta in enumerate(noise_levels):
        deltas = np.empty(n_reps)
        for rep in range(n_reps):
            rng = np.random.default_rng([cfg.seed, level_idx, rep])
            y0p = y0 + eta * rng.standard_normal(n)
            y1p = y1 + eta * rng.standard_normal(n)
            up = u2 + eta * rng.standard_normal(u2.shape)
            stat_p = kcit_statistic(
                np.column_stack([y0p, y1p]), t, np.column_stack([x2, up]), cfg
            )
            deltas[rep] = abs(stat_p - stat_clean)
        medians.append(float(np.median(deltas)))
    return ConvergenceTable(
        clean_statistic=stat_clean,
        noise_levels=tuple(float(e) for e in noise_levels),
        medians=tuple(medians),
    )


def conditional_mutual_information(u, a, x, k: int = 5) -> float:
    """k-NN (KSG-style) estimate of I(U; A | X) in nats, clipped at zero.

    Chebyshev-metric neighborhoods in the joint space set per-point radii;
    marginal-space neighbor counts enter the digamma formula
    psi(k) + E[psi(n_x + 1) - psi(n_ux + 1) - psi(n_ax + 1)].
    """
    ub, ab, xb = _as_block(u), _as_block(a), _as_block(x)
    n = ub.shape[0]
    if n < 20:
        raise ValueError(f"need at least 20 samples, got {n}")
    if k >= n:
        raise ValueError("k must be smaller than the sample size")
    if ab.shape[0] != n or xb.shape[0] != n:
        raise ValueError("length mismatch between U, A, X")

    joint = np.column_stack([ub, ab, xb])
    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    radius = np.nextafter(dist[:, -1], 0)

    def count_within(block: np.ndarray) -> np.ndarray:
        tree = cKDTree(block)
        counts = tree.query_ball_point(block, radius, p=np.inf, return_length=True)
        return np.asarray(counts, dtype=np.float64) - 1.0  # exclude the point itself

    n_ux = count_within(np.column_stack([ub, xb]))
    n_ax = count_within(np.column_stack([ab, xb]))
    n_x = count_within(xb)
    est = digamma(k) + np.mean(digamma(n_x + 1.0) - digamma(n_ux + 1.0) - digamma(n_ax + 1.0))
    return float(max(est, 0.0))
