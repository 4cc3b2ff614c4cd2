"""Acceptance suite: every release criterion at its stated tolerance.

Each test prints one pass/fail line (run with ``pytest tests/test_acceptance.py -s``
to see them live). Thresholds are frozen here; nothing is tuned at runtime.
"""

import time

import numpy as np
import pytest

from naive_oracles import (
    central_difference,
    naive_ate_error,
    naive_att_error,
    naive_kcit_statistic,
    naive_pehe,
    naive_policy_risk,
)
from proci.bench import (
    OutcomeCoefficients,
    SelectionBiasParams,
    TwinsStyleSpec,
    generate_twins_style,
)
from proci.data import ObservationalDataset, default_metas
from proci.estimators import EstimatorConfig, MlpSpec, TarnetSpec
from proci.estimators.nets import init_mlp, mlp_forward_backward, _tarnet_batch_step
from proci.harness import EstimatorPlan, ExperimentConfig, OracleSpec, run_rq1, run_rq2, run_rq3
from proci.kernels import (
    KcitConfig,
    kcit_pvalue,
    kcit_statistic,
    imputation_noise_stability,
)
from proci.loop import ProciConfig, run_proci, run_proci_direct_values
from proci.metrics import EffectEstimates, ate_error, att_error, pehe, policy_risk
from proci.oracle import BenchmarkOracle
from proci.bench import BenchmarkDataset


def report(number: int, name: str, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    print(f"[criterion {number:2d}] {status}: {name} ({detail})")
    assert passed, f"criterion {number} failed: {name} ({detail})"


def ks_uniform_distance(pvals: np.ndarray) -> float:
    s = np.sort(pvals)
    n = s.size
    grid_hi = np.arange(1, n + 1) / n
    grid_lo = np.arange(0, n) / n
    return float(max(np.max(grid_hi - s), np.max(s - grid_lo)))


def conditional_null_instance(rng, n=300):
    """T and the outcome pair are independent given Z; both depend on Z."""
    z = rng.standard_normal((n, 1))
    t = (rng.random(n) < 1.0 / (1.0 + np.exp(-z[:, 0]))).astype(float)
    y0 = z[:, 0] + rng.standard_normal(n)
    y1 = z[:, 0] + 1.0 + rng.standard_normal(n)
    return np.column_stack([y0, y1]), t, z


def test_criterion_01_kcit_calibration():
    t0 = time.monotonic()
    pvals = np.empty(500)
    for r in range(500):
        rng = np.random.default_rng(10_000 + r)
        y, t, z = conditional_null_instance(rng)
        cfg = KcitConfig(gamma=1e-3, alpha=0.05, n_permutations=199, seed=r)
        pvals[r] = kcit_pvalue(y, t, z, cfg).p_value
    elapsed = time.monotonic() - t0
    rejection = float(np.mean(pvals <= 0.05))
    ks = ks_uniform_distance(pvals)
    ok = 0.03 <= rejection <= 0.08 and ks < 0.08 and elapsed < 600
    report(
        1,
        "KCIT calibration under the conditional null",
        ok,
        f"rejection={rejection:.3f} in [0.03,0.08], KS={ks:.3f} < 0.08, {elapsed:.0f}s",
    )


def test_criterion_02_kcit_power():
    rejections = 0
    for r in range(200):
        rng = np.random.default_rng(20_000 + r)
        y, t, z = conditional_null_instance(rng)
        y = y + t[:, None]  # direct treatment signal the conditioning cannot explain
        cfg = KcitConfig(gamma=1e-3, alpha=0.05, n_permutations=199, seed=r)
        rejections += not kcit_pvalue(y, t, z, cfg).passed
    rate = rejections / 200
    report(2, "KCIT power against direct dependence", rate >= 0.80, f"rejection={rate:.3f} >= 0.80")


def test_criterion_03_imputation_noise_stability():
    noise_levels = (0.5, 0.1, 0.01)
    details = []
    ok = True
    for n in (100, 300, 500):
        bench = generate_twins_style(TwinsStyleSpec(n=n, d=6, noise_sd=0.5, seed=1))
        clean = (
            bench.true_y0,
            bench.true_y1,
            bench.base.treatments.astype(float),
            bench.base.covariates,
            bench.hidden_values[:, 0],
        )
        table = imputation_noise_stability(clean, noise_levels, KcitConfig(seed=n), n_reps=11)
        monotone = all(
            table.medians[i] >= table.medians[i + 1] for i in range(len(noise_levels) - 1)
        )
        ok &= monotone
        if n == 500:
            rel = table.medians[-1] / abs(table.clean_statistic)
            ok &= rel < 0.05
            details.append(f"rel@n=500,eta=0.01={rel:.4f} < 0.05")
        details.append(f"n={n} monotone={monotone}")
    report(3, "statistic displacement vanishes with imputation noise", ok, "; ".join(details))


def test_criterion_04_dual_implementation():
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(30_000 + trial)
        n = int(rng.integers(6, 21))
        q = int(rng.integers(0, 4))
        y = rng.standard_normal((n, 2))
        t = np.zeros(n)
        t[rng.choice(n, size=max(1, n // 2), replace=False)] = 1
        z = rng.standard_normal((n, q)) if q else None
        fast = kcit_statistic(y, t, z, KcitConfig(gamma=1e-3))
        naive = naive_kcit_statistic(y, t, z, gamma=1e-3)
        worst = max(worst, abs(fast - naive))
    report(4, "optimized statistic equals naive-loop oracle", worst < 1e-10, f"max|diff|={worst:.2e}")


def _fd_worst(grads_flat, fd_flat):
    worst = 0.0
    for g, f in zip(grads_flat, fd_flat):
        denom = np.maximum(np.maximum(np.abs(g), np.abs(f)), 1e-8)
        worst = max(worst, float(np.max(np.abs(g - f) / denom)))
    return worst


_KINK_MARGIN = 1e-3  # relu is only piecewise smooth; keep FD away from the kink


def _relu_margin_ok(param_sets, x, activation):
    """True when no relu pre-activation sits within the FD neighborhood of 0."""
    if activation != "relu":
        return True
    from proci.estimators.nets import mlp_forward

    h = x
    for params in param_sets:
        h, (pre, _) = mlp_forward(params, h, activation)
        for z in pre[:-1]:  # output layer is linear, no kink
            if np.min(np.abs(z)) < _KINK_MARGIN:
                return False
    return True


def test_criterion_05_gradient_exactness():
    worst_plain = 0.0
    checked_plain = 0
    attempt = 0
    while checked_plain < 70:
        rng = np.random.default_rng(40_000 + attempt)
        attempt += 1
        widths = tuple(int(v) for v in rng.integers(2, 6, size=rng.integers(1, 3)))
        act = ["relu", "elu"][checked_plain % 2]
        loss = ["squared", "bce"][checked_plain % 3 == 0]
        spec = MlpSpec(layer_widths=widths, activation=act, seed=attempt)
        in_dim = int(rng.integers(1, 4))
        m = int(rng.integers(2, 7))
        params = init_mlp(in_dim, widths, 1, np.random.default_rng([attempt, 1]))
        x = rng.standard_normal((m, in_dim))
        if not _relu_margin_ok([params], x, act):
            continue
        if loss == "bce":
            y = (rng.random((m, 1)) < 0.5).astype(float)
        else:
            y = rng.standard_normal((m, 1))
        _, _, grads = mlp_forward_backward(spec, params, (x, y), loss=loss)
        arrays = [arr for pair in params for arr in pair]
        fd = central_difference(
            lambda: mlp_forward_backward(spec, params, (x, y), loss=loss)[1], arrays
        )
        worst_plain = max(worst_plain, _fd_worst([a for p in grads for a in p], fd))
        checked_plain += 1

    worst_cfr = 0.0
    checked_cfr = 0
    attempt = 0
    while checked_cfr < 30:
        rng = np.random.default_rng(50_000 + attempt)
        attempt += 1
        d = int(rng.integers(1, 4))
        m = int(rng.integers(4, 9))
        w_e = int(rng.integers(2, 4))
        w_h = int(rng.integers(2, 4))
        act = ["relu", "elu"][checked_cfr % 2]
        lam = float(rng.uniform(0.1, 1.0))
        eps = float(rng.uniform(0.2, 0.6))
        iters = int(rng.integers(8, 16))
        enc = init_mlp(d, (w_e,), w_e, np.random.default_rng([attempt, 1]))
        h0 = init_mlp(w_e, (w_h,), 1, np.random.default_rng([attempt, 2]))
        h1 = init_mlp(w_e, (w_h,), 1, np.random.default_rng([attempt, 3]))
        x = rng.standard_normal((m, d))
        if act == "relu":
            from proci.estimators.nets import mlp_forward

            phi, (pre_e, _) = mlp_forward(enc, x, act)
            margins = [np.min(np.abs(z)) for z in pre_e[:-1]]
            for head in (h0, h1):
                _, (pre_h, _) = mlp_forward(head, phi, act)
                margins.extend(np.min(np.abs(z)) for z in pre_h[:-1])
            if margins and min(margins) < _KINK_MARGIN:
                continue
        t = np.zeros(m)
        t[rng.choice(m, size=int(rng.integers(1, m)), replace=False)] = 1.0
        y = rng.standard_normal(m)

        def loss_only():
            return _tarnet_batch_step(enc, h0, h1, x, t, y, act, "continuous", lam, eps, iters)[0]

        _, ge, g0, g1 = _tarnet_batch_step(enc, h0, h1, x, t, y, act, "continuous", lam, eps, iters)
        arrays = [arr for params in (enc, h0, h1) for pair in params for arr in pair]
        grads = [arr for gs in (ge, g0, g1) for pair in gs for arr in pair]
        fd = central_difference(loss_only, arrays)
        worst_cfr = max(worst_cfr, _fd_worst(grads, fd))
        checked_cfr += 1

    ok = worst_plain < 1e-4 and worst_cfr < 1e-3
    report(
        5,
        "hand-derived gradients match finite differences",
        ok,
        f"plain={worst_plain:.2e} < 1e-4 (70 cfgs), through-transport={worst_cfr:.2e} < 1e-3 (30 cfgs)",
    )


def test_criterion_06_metric_oracles():
    checked = 0
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(60_000 + seed)
        n = int(rng.integers(6, 51))
        t = rng.integers(0, 2, n)
        t[:2] = [0, 1]
        mask = rng.random(n) < 0.7
        mask[:2] = True
        y0 = rng.standard_normal(n)
        y1 = rng.standard_normal(n)
        y = np.where(t == 1, y1, y0)
        tau = rng.standard_normal(n)
        base = ObservationalDataset(np.zeros((n, 1)), t, y, default_metas(["x"]))
        ds = BenchmarkDataset(base=base, true_y0=y0, true_y1=y1, randomized_mask=mask)
        est = EffectEstimates(tau_hat=tau)

        worst = max(worst, abs(pehe(y0, y1, est) - naive_pehe(y0, y1, tau)))
        worst = max(worst, abs(ate_error(y0, y1, est) - naive_ate_error(y0, y1, tau)))
        if (mask & (t == 1)).any():
            worst = max(
                worst, abs(att_error(ds, est) - naive_att_error(t, mask, tau, y0=y0, y1=y1))
            )
        try:
            expected = naive_policy_risk(t, y, mask, tau)
        except ValueError:
            with pytest.raises(ValueError):
                policy_risk(ds, est)
        else:
            worst = max(worst, abs(policy_risk(ds, est) - expected))
        checked += 1
    ok = checked == 200 and worst < 1e-12
    report(6, "metric formulas match brute-force oracles", ok, f"200 instances, max|diff|={worst:.2e}")


def _rq1_acceptance_config() -> ExperimentConfig:
    return ExperimentConfig(
        generator=TwinsStyleSpec(n=600, d=6, noise_sd=0.5, seed=0),
        estimators=(
            EstimatorPlan(
                kind="tarnet",
                config=EstimatorConfig(
                    learning_rate=1e-2, batch_size=64, max_epochs=200, patience=30
                ),
                spec=TarnetSpec(encoder_widths=(32,), head_widths=(16,)),
            ),
        ),
        seeds=tuple(range(10)),
        proci_enabled=True,
        oracle=OracleSpec(source="rule:truth-revealing"),
        kcit=KcitConfig(n_permutations=199),
        max_iterations=3,
    )


def test_criterion_07_rq1_directional_analog():
    rep = run_rq1(_rq1_acceptance_config()).report
    cells = rep["cells"]["tarnet"]
    wins = 0
    for s in map(str, range(10)):
        base = cells["base"]["per_seed"][s]["out_sample"]["pehe"]
        aug = cells["proci"]["per_seed"][s]["out_sample"]["pehe"]
        wins += aug <= 0.9 * base
    report(
        7,
        "augmentation cuts out-of-sample effect error by >= 10%",
        wins >= 8,
        f"wins={wins}/10 seeds (need >= 8)",
    )


def test_criterion_08_rq3_robustness_analog():
    d = 6
    coef = OutcomeCoefficients(
        baseline=tuple(1.0 if i % 2 == 0 else -1.0 for i in range(d)),
        proxy_weight=5.0,
        effect_intercept=1.0,
        effect_slopes=tuple(0.25 if i % 2 == 0 else -0.25 for i in range(d)),
    )
    cfg = ExperimentConfig(
        generator=TwinsStyleSpec(
            n=500, d=d, noise_sd=0.5, seed=0, hide_proxy=False, w_outcome=coef
        ),
        estimators=(
            EstimatorPlan(
                kind="cfr-wass",
                config=EstimatorConfig(
                    learning_rate=1e-2,
                    batch_size=150,
                    balance_weight=1e-2,
                    max_epochs=80,
                    patience=20,
                    sinkhorn_iters=10,
                ),
                spec=TarnetSpec(encoder_widths=(32,), head_widths=(16,)),
            ),
        ),
        seeds=(0, 1, 2, 3),
        proci_enabled=True,
        oracle=OracleSpec(source="rule:truth-revealing"),
        kcit=KcitConfig(n_permutations=199),
        max_iterations=6,
        removal_counts=(0, 1, 2, 3, 4),
    )
    summary = run_rq3(cfg).report["summary"]
    rho = summary["base_spearman_k_vs_pehe"]
    ratio = summary["proci_degradation"] / max(summary["base_degradation"], 1e-12)
    ok = rho >= 0.6 and ratio <= 0.5
    report(
        8,
        "baseline degrades monotonically; augmented pipeline stays flat",
        ok,
        f"spearman={rho:.2f} >= 0.6, degradation ratio={ratio:.3f} <= 0.5",
    )


def test_criterion_09_rq2_information_analog():
    cfg = ExperimentConfig(
        generator=TwinsStyleSpec(n=2000, d=6, noise_sd=0.5, seed=0),
        estimators=(EstimatorPlan(kind="s-learner"),),
        seeds=tuple(range(10)),
        proci_enabled=True,
        oracle=OracleSpec(source="rule:truth-revealing"),
        kcit=KcitConfig(),
    )
    wins = run_rq2(cfg).report["wins"]
    ok = wins["cmi_t"] >= 9 and wins["cmi_y"] >= 9
    report(
        9,
        "generated confounders carry more conditional information than noise",
        ok,
        f"treatment wins={wins['cmi_t']}/10, outcome wins={wins['cmi_y']}/10 (need >= 9)",
    )


def test_criterion_10_generator_fidelity():
    spec = TwinsStyleSpec(n=50_000, d=3, seed=11)
    params = SelectionBiasParams(w_o=(0.0, 0.0, 0.0), w_h=5.0)
    bench = generate_twins_style(spec, params=params)
    z = bench.hidden_values[:, 0]
    t = bench.base.treatments
    worst = 0.0
    for level in range(1, 11):
        mask = z == level
        expected = 1.0 / (1.0 + np.exp(-5.0 * (level / 10.0 - 0.1)))
        worst = max(worst, abs(float(t[mask].mean()) - expected))
    report(10, "per-level treatment rates match the closed form", worst < 0.02, f"max gap={worst:.4f} < 0.02")


def test_criterion_11_experiment_determinism():
    cfg = ExperimentConfig(
        generator=TwinsStyleSpec(n=150, d=3, noise_sd=0.5, seed=0),
        estimators=(EstimatorPlan(kind="s-learner"),),
        seeds=(0, 1),
        proci_enabled=True,
        oracle=OracleSpec(source="rule:truth-revealing"),
        kcit=KcitConfig(n_permutations=99),
        max_iterations=2,
        split_ratios=(0.6, 0.2, 0.2),
    )
    a = run_rq1(cfg).to_json().encode()
    b = run_rq1(cfg).to_json().encode()
    report(11, "repeated runs serialize byte-identically", a == b, f"{len(a)} bytes compared")


def test_criterion_12_factual_preservation_end_to_end():
    checked = 0
    exact = True
    for seed, rule in ((0, "truth-revealing"), (1, "random-noise"), (2, "factual-plus-constant")):
        bench = generate_twins_style(TwinsStyleSpec(n=200, d=4, noise_sd=0.5, seed=seed))
        oracle = BenchmarkOracle(bench, rule, seed=seed, constant=0.7)
        cfg = ProciConfig(
            kcit=KcitConfig(seed=seed), oracle=oracle, max_iterations=2, seed=seed
        )
        result = run_proci(bench.base, cfg)
        po = result.potential_outcomes
        factual = np.where(bench.base.treatments == 1, po.y1_hat, po.y0_hat)
        exact &= bool(np.array_equal(factual, bench.base.outcomes))
        checked += 1
    bench = generate_twins_style(TwinsStyleSpec(n=200, d=4, noise_sd=0.5, seed=3))
    result = run_proci_direct_values(
        bench.base,
        ProciConfig(
            kcit=KcitConfig(seed=3),
            oracle=BenchmarkOracle(bench, "collapsed-direct", seed=3, constant=0.5),
            max_iterations=2,
            seed=3,
        ),
    )
    po = result.potential_outcomes
    factual = np.where(bench.base.treatments == 1, po.y1_hat, po.y0_hat)
    exact &= bool(np.array_equal(factual, bench.base.outcomes))
    checked += 1
    report(12, "factual arm always equals the observed outcome exactly", exact, f"{checked} runs checked")
