import numpy as np
import pytest

from proci.imputation import (
    BERNOULLI,
    GAUSSIAN,
    DistributionFamily,
    PerUnitParams,
    construct_potential_outcomes,
    sample_confounder_values,
    standardize_column,
    write_po_table_csv,
)


class TestDistributionFamily:
    def test_categorical_needs_levels(self):
        with pytest.raises(ValueError, match="levels"):
            DistributionFamily("categorical")
        with pytest.raises(ValueError, match="levels"):
            DistributionFamily("categorical", levels=1)

    def test_scalar_families_take_no_levels(self):
        with pytest.raises(ValueError, match="no level"):
            DistributionFamily("gaussian", levels=3)

    def test_unknown_tag(self):
        with pytest.raises(ValueError, match="unsupported"):
            DistributionFamily("poisson")


class TestPerUnitParams:
    def test_gaussian_positive_sd_enforced(self):
        with pytest.raises(ValueError, match="positive"):
            PerUnitParams(GAUSSIAN, ((0.0, 0.0),))

    def test_bernoulli_range_enforced(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            PerUnitParams(BERNOULLI, ((1.5,),))

    def test_categorical_rows_sum_to_one(self):
        fam = DistributionFamily("categorical", levels=3)
        PerUnitParams(fam, ((0.2, 0.3, 0.5),))
        with pytest.raises(ValueError, match="sum to 1"):
            PerUnitParams(fam, ((0.2, 0.3, 0.6),))


class TestSampling:
    def test_near_degenerate_gaussian_concentrates(self):
        pp = PerUnitParams(GAUSSIAN, ((2.0, 1e-9),) * 5)
        values = sample_confounder_values(pp, seed=0)
        assert np.max(np.abs(values - 2.0)) < 1e-6

    def test_degenerate_bernoulli_exact(self):
        pp = PerUnitParams(BERNOULLI, ((0.0,), (1.0,), (0.0,), (1.0,)))
        values = sample_confounder_values(pp, seed=3)
        assert np.array_equal(values, [0.0, 1.0, 0.0, 1.0])

    def test_gaussian_moments(self):
        n = 10_000
        pp = PerUnitParams(GAUSSIAN, ((0.0, 1.0),) * n)
        values = sample_confounder_values(pp, seed=7)
        assert abs(values.mean()) < 0.05
        assert abs(values.var() - 1.0) < 0.1

    def test_deterministic(self):
        pp = PerUnitParams(GAUSSIAN, ((0.0, 1.0),) * 20)
        assert np.array_equal(
            sample_confounder_values(pp, seed=11), sample_confounder_values(pp, seed=11)
        )

    def test_per_unit_streams_stable_under_subsetting(self):
        pp_full = PerUnitParams(GAUSSIAN, ((0.0, 1.0),) * 10)
        full = sample_confounder_values(pp_full, seed=5)
        pp_sub = PerUnitParams(GAUSSIAN, ((0.0, 1.0),) * 4)
        sub = sample_confounder_values(pp_sub, seed=5)
        assert np.array_equal(full[:4], sub)

    def test_categorical_codes(self):
        fam = DistributionFamily("categorical", levels=3)
        pp = PerUnitParams(fam, ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0)))
        values = sample_confounder_values(pp, seed=0)
        assert np.array_equal(values, [0.0, 2.0])


class TestPotentialOutcomes:
    def test_treated_unit_assignment(self):
        table = construct_potential_outcomes([1], [5.0], [3.0])
        assert (table.y0_hat[0], table.y1_hat[0]) == (3.0, 5.0)

    def test_control_unit_assignment(self):
        table = construct_potential_outcomes([0], [5.0], [3.0])
        assert (table.y0_hat[0], table.y1_hat[0]) == (5.0, 3.0)

    def test_identity_imputation_gives_zero_effect(self):
        y = np.array([1.0, 2.0, 3.0])
        table = construct_potential_outcomes([0, 1, 0], y, y.copy())
        assert np.array_equal(table.y0_hat, y)
        assert np.array_equal(table.y1_hat, y)

    def test_factual_preserved_bitwise(self):
        rng = np.random.default_rng(0)
        t = rng.integers(0, 2, 50)
        y = rng.standard_normal(50)
        table = construct_potential_outcomes(t, y, rng.standard_normal(50))
        factual = np.where(t == 1, table.y1_hat, table.y0_hat)
        assert np.array_equal(factual, y)
        assert np.array_equal(table.factual(), y)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="equal-length"):
            construct_potential_outcomes([0, 1], [1.0], [2.0])

    def test_csv_serialization(self, tmp_path):
        table = construct_potential_outcomes([0, 1], [1.0, 2.0], [3.0, 4.0])
        path = tmp_path / "po.csv"
        write_po_table_csv(table, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "y0_hat,y1_hat,factual_arm"
        assert lines[1] == "1.0,3.0,0"
        assert lines[2] == "4.0,2.0,1"


class TestStandardize:
    def test_three_values(self):
        out = standardize_column([1.0, 2.0, 3.0])
        assert np.allclose(out.values, [-1.224744871, 0.0, 1.224744871], atol=1e-8)
        assert out.mean == 2.0
        assert out.sd == pytest.approx(np.sqrt(2.0 / 3.0))
        assert not out.degenerate

    def test_constant_degenerate(self):
        out = standardize_column([4.0, 4.0])
        assert np.array_equal(out.values, [0.0, 0.0])
        assert out.sd == 0.0
        assert out.degenerate

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal(50)
        once = standardize_column(v).values
        twice = standardize_column(once).values
        assert np.max(np.abs(once - twice)) < 1e-10
