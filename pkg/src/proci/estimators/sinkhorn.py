"""Debiased entropic optimal-transport divergence with exact unrolled gradients.

The divergence is S(A, B) = OT(A, B) - OT(A, A)/2 - OT(B, B)/2, where OT is
the dual objective after a fixed number of log-domain Sinkhorn iterations
with squared-Euclidean cost and uniform marginals. Gradients are reverse-mode
through the unrolled iterations (softmax adjoints per update), so they match
finite differences of the implemented map at any iteration count, converged
or not.
"""

from __future__ import annotations

import numpy as np


def _lse(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = np.max(z, axis=axis, keepdims=True)
    out = zmax + np.log(np.sum(np.exp(z - zmax), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    return e / np.sum(e, axis=axis, keepdims=True)


def _entropic_ot(a: np.ndarray, b: np.ndarray, epsilon: float, iters: int):
    """Dual value and the per-iteration potentials needed for backprop."""
    m, k = a.shape[0], b.shape[0]
    cost = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(cost, 0.0, out=cost)
    log_a = -np.log(m)
    log_b = -np.log(k)
    f = np.zeros(m)
    g = np.zeros(k)
    f_hist: list[np.ndarray] = []
    g_hist: list[np.ndarray] = [g]
    for _ in range(iters):
        f = -epsilon * _lse((g[None, :] - cost) / epsilon + log_b, axis=1)
        f_hist.append(f)
        g = -epsilon * _lse((f[:, None] - cost) / epsilon + log_a, axis=0)
        g_hist.append(g)
    value = float(f.mean() + g.mean())
    return value, cost, f_hist, g_hist


def _entropic_ot_backward(
    a: np.ndarray,
    b: np.ndarray,
    epsilon: float,
    cost: np.ndarray,
    f_hist: list[np.ndarray],
    g_hist: list[np.ndarray],
):
    """Adjoints of the dual value w.r.t. both point clouds."""
    m, k = a.shape[0], b.shape[0]
    log_a = -np.log(m)
    log_b = -np.log(k)
    df = np.full(m, 1.0 / m)
    dg = np.full(k, 1.0 / k)
    d_cost = np.zeros_like(cost)
    for l in range(len(f_hist) - 1, -1, -1):
        # g_l = -eps lse_i((f_l - C)/eps + log_a): column softmax over i
        v = _softmax((f_hist[l][:, None] - cost) / epsilon + log_a, axis=0)
        df -= v @ dg
        d_cost += v * dg[None, :]
        # f_l = -eps lse_j((g_{l-1} - C)/eps + log_b): row softmax over j
        w = _softmax((g_hist[l][None, :] - cost) / epsilon + log_b, axis=1)
        dg = -(w.T @ df)
        d_cost += w * df[:, None]
        df = np.zeros(m)
    # cost_ij = ||a_i - b_j||^2
    row = d_cost.sum(axis=1)
    col = d_cost.sum(axis=0)
    grad_a = 2.0 * (row[:, None] * a - d_cost @ b)
    grad_b = 2.0 * (col[:, None] * b - d_cost.T @ a)
    return grad_a, grad_b


def _ot_with_grad(a: np.ndarray, b: np.ndarray, epsilon: float, iters: int):
    value, cost, f_hist, g_hist = _entropic_ot(a, b, epsilon, iters)
    grad_a, grad_b = _entropic_ot_backward(a, b, epsilon, cost, f_hist, g_hist)
    return value, grad_a, grad_b


def sinkhorn_divergence_with_grad(a, b, epsilon: float = 0.1, iters: int = 100):
    """Divergence plus gradients w.r.t. both point clouds.

    A non-positive raw value clamps to zero with zero gradients (consistent
    subgradient of max(., 0)).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("point clouds must be 2-d with matching dimension")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("each cloud needs at least one point")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite points")
    if not epsilon > 0 or iters < 1:
        raise ValueError("need epsilon > 0 and at least one iteration")

    v_ab, ga_ab, gb_ab = _ot_with_grad(a, b, epsilon, iters)
    v_aa, ga_aa_1, ga_aa_2 = _ot_with_grad(a, a, epsilon, iters)
    v_bb, gb_bb_1, gb_bb_2 = _ot_with_grad(b, b, epsilon, iters)
    value = v_ab - 0.5 * v_aa - 0.5 * v_bb
    if value <= 0.0:
        return 0.0, np.zeros_like(a), np.zeros_like(b)
    grad_a = ga_ab - 0.5 * (ga_aa_1 + ga_aa_2)
    grad_b = gb_ab - 0.5 * (gb_bb_1 + gb_bb_2)
    return float(value), grad_a, grad_b


def sinkhorn_divergence(a, b, epsilon: float = 0.1, iters: int = 100) -> float:
    """Debiased entropic OT divergence; zero for identical clouds."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("point clouds must be 2-d with matching dimension")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("each cloud needs at least one point")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite points")
    if not epsilon > 0 or iters < 1:
        raise ValueError("need epsilon > 0 and at least one iteration")
    v_ab = _entropic_ot(a, b, epsilon, iters)[0]
    v_aa = _entropic_ot(a, a, epsilon, iters)[0]
    v_bb = _entropic_ot(b, b, epsilon, iters)[0]
    return max(0.0, v_ab - 0.5 * v_aa - 0.5 * v_bb)
