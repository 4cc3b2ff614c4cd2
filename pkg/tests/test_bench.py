import numpy as np
import pytest

from proci.bench import (
    OutcomeCoefficients,
    SelectionBiasParams,
    TwinsStyleSpec,
    assign_selection_bias,
    build_jobs_style,
    generate_twins_style,
    read_benchmark,
    remove_confounders,
    take_benchmark_rows,
    write_benchmark,
)
from proci.data import ObservationalDataset, default_metas
from proci.metrics import EffectEstimates, pehe


def jobs_parts(n_exp_treated=20, n_exp_control=25, n_obs=60, seed=0):
    rng = np.random.default_rng(seed)
    meta = default_metas(["age", "earnings"])

    def block(n, t_value=None):
        t = rng.integers(0, 2, n) if t_value is None else np.full(n, t_value, dtype=int)
        return ObservationalDataset(
            covariates=rng.standard_normal((n, 2)),
            treatments=t,
            outcomes=rng.integers(0, 2, n).astype(float),
            meta=meta,
        )

    n_exp = n_exp_treated + n_exp_control
    t_exp = np.concatenate([np.ones(n_exp_treated, dtype=int), np.zeros(n_exp_control, dtype=int)])
    exp = ObservationalDataset(
        covariates=rng.standard_normal((n_exp, 2)),
        treatments=t_exp,
        outcomes=rng.integers(0, 2, n_exp).astype(float),
        meta=meta,
    )
    return exp, block(n_obs, t_value=0)


class TestSelectionBias:
    def test_zero_weights_rate_half(self):
        n = 20_000
        x = np.random.default_rng(0).standard_normal((n, 2))
        z = np.ones(n, dtype=int)
        t = assign_selection_bias(x, z, SelectionBiasParams((0.0, 0.0), 5.0), seed=1)
        assert abs(t.mean() - 0.5) < 0.02

    def test_top_level_rate_matches_logistic_value(self):
        # sigmoid(5 * (10/10 - 0.1)) = sigmoid(4.5) = 0.9890130...
        n = 50_000
        x = np.zeros((n, 1))
        z = np.full(n, 10, dtype=int)
        t = assign_selection_bias(x, z, SelectionBiasParams((0.0,), 5.0), seed=2)
        assert abs(t.mean() - 0.9890130573694068) < 0.005

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            assign_selection_bias(
                np.zeros((5, 3)), np.ones(5, dtype=int), SelectionBiasParams((0.0,), 5.0), 0
            )

    def test_deterministic_given_seed(self):
        x = np.random.default_rng(3).standard_normal((50, 2))
        z = np.random.default_rng(4).integers(1, 11, 50)
        p = SelectionBiasParams((0.1, -0.2), 5.0)
        assert np.array_equal(
            assign_selection_bias(x, z, p, seed=7), assign_selection_bias(x, z, p, seed=7)
        )


class TestTwinsStyle:
    def test_consistency_every_row(self):
        b = generate_twins_style(TwinsStyleSpec(n=200, d=4, seed=0))
        expected = np.where(b.base.treatments == 1, b.true_y1, b.true_y0)
        assert np.array_equal(b.base.outcomes, expected)

    def test_zero_effect_makes_arms_equal(self):
        coef = OutcomeCoefficients(
            baseline=(1.0, -1.0), proxy_weight=2.0, effect_intercept=0.0, effect_slopes=(0.0, 0.0)
        )
        b = generate_twins_style(TwinsStyleSpec(n=100, d=2, seed=1, w_outcome=coef))
        assert np.array_equal(b.true_y0, b.true_y1)
        zero = EffectEstimates(tau_hat=np.zeros(100))
        assert pehe(b.true_y0, b.true_y1, zero) == 0.0

    def test_bit_identical_across_runs(self):
        a = generate_twins_style(TwinsStyleSpec(n=60, d=3, seed=9))
        b = generate_twins_style(TwinsStyleSpec(n=60, d=3, seed=9))
        assert np.array_equal(a.base.covariates, b.base.covariates)
        assert np.array_equal(a.base.treatments, b.base.treatments)
        assert np.array_equal(a.true_y0, b.true_y0)
        assert a.provenance == b.provenance

    def test_proxy_hidden_by_default(self):
        b = generate_twins_style(TwinsStyleSpec(n=50, d=3, seed=0))
        assert b.base.n_covariates == 3
        assert b.hidden_columns == (3,)
        assert b.hidden_values.shape == (50, 1)
        assert set(np.unique(b.hidden_values).tolist()) <= set(float(v) for v in range(1, 11))

    def test_proxy_observable_on_request(self):
        b = generate_twins_style(TwinsStyleSpec(n=50, d=3, seed=0, hide_proxy=False))
        assert b.base.n_covariates == 4
        assert b.hidden_columns == ()

    def test_params_recorded_for_reproducibility(self):
        b = generate_twins_style(TwinsStyleSpec(n=50, d=3, seed=0))
        assert len(b.provenance["w_o"]) == 3
        assert isinstance(b.provenance["w_h"], float)


class TestJobsStyle:
    def test_counts_and_mask(self):
        exp, obs = jobs_parts(n_exp_treated=297, n_exp_control=425, n_obs=2490)
        b = build_jobs_style(exp, obs)
        assert b.base.n_units == 3212
        assert int(b.randomized_mask.sum()) == 722
        assert b.true_y0 is None and b.true_y1 is None

    def test_empty_observational_is_identity_merge(self):
        exp, obs = jobs_parts(n_obs=0)
        b = build_jobs_style(exp, obs)
        assert b.base.n_units == exp.n_units
        assert b.randomized_mask.all()

    def test_treated_observational_row_rejected(self):
        exp, _ = jobs_parts()
        bad = ObservationalDataset(
            covariates=np.zeros((3, 2)),
            treatments=[0, 1, 0],
            outcomes=np.zeros(3),
            meta=exp.meta,
        )
        with pytest.raises(ValueError, match="only control"):
            build_jobs_style(exp, bad)

    def test_schema_mismatch_rejected(self):
        exp, obs = jobs_parts()
        renamed = ObservationalDataset(
            covariates=obs.covariates,
            treatments=obs.treatments,
            outcomes=obs.outcomes,
            meta=default_metas(["other", "earnings"]),
        )
        with pytest.raises(ValueError, match="schema"):
            build_jobs_style(exp, renamed)

    def test_everyone_outside_mask_is_control(self):
        exp, obs = jobs_parts()
        b = build_jobs_style(exp, obs)
        assert (b.base.treatments[~b.randomized_mask] == 0).all()


class TestRemoveConfounders:
    def test_k_zero_identity(self):
        b = generate_twins_style(TwinsStyleSpec(n=40, d=4, seed=2))
        assert remove_confounders(b, 0, seed=1) is b

    def test_remove_all(self):
        b = generate_twins_style(TwinsStyleSpec(n=40, d=4, seed=2, hide_proxy=False))
        out = remove_confounders(b, 5, seed=1)
        assert out.base.n_covariates == 0
        assert len(out.hidden_columns) == 5

    def test_same_seed_same_columns(self):
        b = generate_twins_style(TwinsStyleSpec(n=40, d=5, seed=2))
        a = remove_confounders(b, 2, seed=3)
        c = remove_confounders(b, 2, seed=3)
        assert a.hidden_columns == c.hidden_columns

    def test_k_too_large(self):
        b = generate_twins_style(TwinsStyleSpec(n=40, d=3, seed=2))
        with pytest.raises(ValueError, match="outside"):
            remove_confounders(b, 4, seed=0)

    def test_ground_truth_untouched(self):
        b = generate_twins_style(TwinsStyleSpec(n=40, d=4, seed=2))
        out = remove_confounders(b, 2, seed=5)
        assert np.array_equal(out.true_y0, b.true_y0)
        assert np.array_equal(out.true_y1, b.true_y1)
        assert np.array_equal(out.base.outcomes, b.base.outcomes)

    def test_hidden_values_track_dropped_columns(self):
        b = generate_twins_style(TwinsStyleSpec(n=40, d=4, seed=2))
        out = remove_confounders(b, 2, seed=5)
        # hidden = [proxy] + 2 dropped columns, each recoverable by name
        assert out.hidden_values.shape == (40, 3)
        for slot, meta in enumerate(out.hidden_metas[1:], start=1):
            original_col = [m.name for m in b.base.covariate_metas].index(meta.name)
            assert np.array_equal(out.hidden_values[:, slot], b.base.covariates[:, original_col])


class TestBenchmarkIo:
    def test_round_trip(self, tmp_path):
        b = generate_twins_style(TwinsStyleSpec(n=30, d=3, seed=4))
        write_benchmark(b, tmp_path)
        back = read_benchmark(tmp_path)
        assert np.array_equal(back.base.covariates, b.base.covariates)
        assert np.array_equal(back.base.treatments, b.base.treatments)
        assert np.array_equal(back.true_y0, b.true_y0)
        assert np.array_equal(back.hidden_values, b.hidden_values)
        assert back.base.treatment_meta.name == b.base.treatment_meta.name

    def test_take_rows_alignment(self):
        b = generate_twins_style(TwinsStyleSpec(n=30, d=3, seed=4))
        sub = take_benchmark_rows(b, [5, 2, 9])
        assert np.array_equal(sub.true_y1, b.true_y1[[5, 2, 9]])
        assert np.array_equal(sub.hidden_values, b.hidden_values[[5, 2, 9]])
