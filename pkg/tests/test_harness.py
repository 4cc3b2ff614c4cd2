import json

import numpy as np
import pytest

from proci.bench import TwinsStyleSpec, generate_twins_style
from proci.cli import main as cli_main
from proci.data import ObservationalDataset, SplitSpec, default_metas, split_dataset
from proci.estimators import EstimatorConfig, TarnetSpec
from proci.harness import (
    EstimatorPlan,
    ExperimentConfig,
    OracleSpec,
    grid_search,
    run_rq1,
    run_rq2,
    run_rq4,
)
from proci.kernels import KcitConfig


def tiny_experiment(**overrides) -> ExperimentConfig:
    defaults = dict(
        generator=TwinsStyleSpec(n=120, d=3, noise_sd=0.5, seed=0),
        estimators=(
            EstimatorPlan(
                kind="s-learner",
                config=EstimatorConfig(ridge_penalty=1e-6),
            ),
        ),
        seeds=(0, 1),
        proci_enabled=True,
        oracle=OracleSpec(source="rule:truth-revealing"),
        kcit=KcitConfig(n_permutations=99),
        max_iterations=2,
        split_ratios=(0.6, 0.2, 0.2),
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


def split_pair(seed=0, n=200):
    bench = generate_twins_style(TwinsStyleSpec(n=n, d=3, noise_sd=0.5, seed=seed))
    tr, va, _ = split_dataset(bench.base, SplitSpec((0.6, 0.2, 0.2), seed=seed))
    return tr, va


class TestGridSearch:
    def test_singleton_grid_returns_that_cell(self):
        tr, va = split_pair()
        plan = EstimatorPlan(kind="s-learner", grid={"ridge": [0.5]})
        result = grid_search(plan, tr, va)
        assert result.cell == {"ridge": 0.5}
        assert result.config.ridge_penalty == 0.5

    def test_tie_breaks_to_first_cell(self):
        tr, va = split_pair()
        # identical penalty values produce identical losses; first must win
        plan = EstimatorPlan(kind="s-learner", grid={"ridge": [0.3, 0.3]})
        result = grid_search(plan, tr, va)
        assert result.cell == {"ridge": 0.3}
        assert [c["cell"] for c in result.cells] == [{"ridge": 0.3}, {"ridge": 0.3}]
        assert result.cells[0]["val_loss"] == result.cells[1]["val_loss"]

    def test_minimal_validation_loss_selected(self):
        tr, va = split_pair(n=300)
        plan = EstimatorPlan(
            kind="tarnet",
            grid={"lr": [1e-1, 1e-3]},
            config=EstimatorConfig(batch_size=64, max_epochs=60, patience=15),
            spec=TarnetSpec(encoder_widths=(8,), head_widths=(8,)),
        )
        result = grid_search(plan, tr, va, seed=0)
        losses = {c["cell"]["lr"]: c["val_loss"] for c in result.cells if c["status"] == "ok"}
        assert result.cell["lr"] == min(losses, key=losses.get)
        assert result.val_loss == min(losses.values())

    def test_failed_cell_excluded_and_stable_cell_wins(self):
        # one treated unit: small batches cannot keep both arms in every
        # batch, so that cell fails while the full-batch cell trains fine
        rng = np.random.default_rng(2)
        n = 50
        x = rng.standard_normal((n, 2))
        t = np.zeros(n, dtype=int)
        t[0] = 1
        y = x[:, 0] + t + 0.1 * rng.standard_normal(n)
        ds = ObservationalDataset(x, t, y, default_metas(["a", "b"]))
        plan = EstimatorPlan(
            kind="tarnet",
            grid={"bs": [10, 50]},
            config=EstimatorConfig(learning_rate=1e-2, max_epochs=10, patience=10),
            spec=TarnetSpec(encoder_widths=(4,), head_widths=(4,)),
        )
        result = grid_search(plan, ds, ds, seed=0)
        statuses = {c["cell"]["bs"]: c["status"] for c in result.cells}
        assert statuses == {10: "diverged", 50: "ok"}
        assert result.cell == {"bs": 50}

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_all_cells_diverged_raises(self):
        rng = np.random.default_rng(0)
        n = 40
        x = np.full((n, 2), 1e160)
        t = rng.integers(0, 2, n)
        t[:2] = [0, 1]
        ds = ObservationalDataset(x, t, np.full(n, 1e160), default_metas(["a", "b"]))
        tr, va = ds, ds
        plan = EstimatorPlan(
            kind="tarnet",
            grid={"lr": [1e-3, 1e-2]},
            config=EstimatorConfig(batch_size=16, max_epochs=3, patience=2),
            spec=TarnetSpec(encoder_widths=(4,), head_widths=(4,)),
        )
        with pytest.raises(RuntimeError, match="diverged"):
            grid_search(plan, tr, va)

    def test_cells_enumerated_in_product_order(self):
        tr, va = split_pair()
        plan = EstimatorPlan(kind="s-learner", grid={"ridge": [0.1, 0.2]})
        result = grid_search(plan, tr, va)
        assert [c["cell"]["ridge"] for c in result.cells] == [0.1, 0.2]


class TestExperimentConfig:
    def test_duplicate_seeds_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            tiny_experiment(seeds=(1, 1))

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError, match="empty grid"):
            tiny_experiment(
                estimators=(EstimatorPlan(kind="s-learner", grid={"ridge": []}),)
            )

    def test_removal_counts_must_increase(self):
        with pytest.raises(ValueError, match="increasing"):
            tiny_experiment(removal_counts=(0, 2, 1))


class TestRunRq1:
    def test_proci_off_emits_base_only(self):
        report = run_rq1(tiny_experiment(proci_enabled=False)).report
        assert set(report["cells"]["s-learner"]) == {"base"}
        assert report["proci_runs"] == {"0": None, "1": None}

    def test_report_structure_and_aggregation(self):
        report = run_rq1(tiny_experiment()).report
        cell = report["cells"]["s-learner"]["proci"]
        assert set(cell["per_seed"]) == {"0", "1"}
        agg = cell["aggregate"]["out_sample"]["pehe"]
        vals = [cell["per_seed"][s]["out_sample"]["pehe"] for s in ("0", "1")]
        assert agg["mean"] == pytest.approx(np.mean(vals))
        assert agg["sd"] == pytest.approx(np.std(vals, ddof=1))

    def test_byte_identical_reports(self):
        a = run_rq1(tiny_experiment()).to_json()
        b = run_rq1(tiny_experiment()).to_json()
        assert a == b

    def test_workers_do_not_change_results(self):
        a = run_rq1(tiny_experiment()).to_json()
        b = run_rq1(tiny_experiment(workers=2)).to_json()
        assert a == b

    def test_cell_reproducible_in_isolation(self):
        from proci.harness import _fit_and_score, _make_benchmark, _splits

        cfg = tiny_experiment()
        report = run_rq1(cfg).report
        seed = 1
        bench = _make_benchmark(cfg, seed)
        tr, va, te = _splits(bench, cfg, seed)
        cell = _fit_and_score(cfg.estimators[0], bench, cfg, seed, tr, va, te)
        recorded = report["cells"]["s-learner"]["base"]["per_seed"][str(seed)]
        assert cell["out_sample"] == recorded["out_sample"]
        assert cell["in_sample"] == recorded["in_sample"]


class TestRunRq2AndRq4:
    def test_rq2_reports_wins(self):
        cfg = tiny_experiment(
            generator=TwinsStyleSpec(n=300, d=3, noise_sd=0.5, seed=0), seeds=(0, 1, 2)
        )
        report = run_rq2(cfg).report
        assert report["wins"]["out_of"] == 3
        for seed_entry in report["per_seed"].values():
            assert {"generated", "random"} <= set(seed_entry)

    def test_rq2_random_confounder_near_zero_outcome_cmi(self):
        cfg = tiny_experiment(
            generator=TwinsStyleSpec(n=2000, d=3, noise_sd=0.5, seed=0), seeds=(0, 1)
        )
        report = run_rq2(cfg).report
        for entry in report["per_seed"].values():
            assert entry["random"]["cmi_y"] < 0.05

    def test_rq4_contains_all_variants(self):
        cfg = tiny_experiment(
            estimators=(EstimatorPlan(kind="s-learner"),), seeds=(0,), fixed_k=1
        )
        report = run_rq4(cfg).report
        assert set(report["aggregate"]) == {"full", "wo_dr", "wo_pi", "wo_ut"}
        full = report["per_seed"]["0"]["full"]
        assert "pehe" in full["out_sample"]


class TestCli:
    def test_gen_proci_fit_kcit_pipeline(self, tmp_path, capsys):
        bench_dir = tmp_path / "bench"
        assert cli_main([
            "gen", "--n", "120", "--d", "3", "--seed", "3", "--out", str(bench_dir)
        ]) == 0
        assert (bench_dir / "covariates.csv").exists()
        assert (bench_dir / "meta.json").exists()

        run_dir = tmp_path / "run"
        code = cli_main([
            "proci", "--data", str(bench_dir), "--oracle", "rule:truth-revealing",
            "--seed", "3", "--out", str(run_dir),
        ])
        assert code == 0
        assert (run_dir / "augmented.csv").exists()
        summary = json.loads((run_dir / "iterations.json").read_text())
        assert summary["termination"] == "passed"

        fit_dir = tmp_path / "fit"
        assert cli_main([
            "fit", "--data", str(bench_dir), "--estimator", "s-learner",
            "--out", str(fit_dir),
        ]) == 0
        fit_doc = json.loads((fit_dir / "fit.json").read_text())
        assert "pehe" in fit_doc["metrics"]

        code = cli_main([
            "kcit", "--data", str(bench_dir), "--po", str(run_dir / "po_table.csv"),
        ])
        out = capsys.readouterr().out
        assert '"p_value"' in out

    def test_experiment_rq2_with_toml_config(self, tmp_path, capsys):
        config = tmp_path / "exp.toml"
        config.write_text(
            "\n".join(
                [
                    "seeds = [0, 1]",
                    "[dataset]",
                    "n = 200",
                    "d = 3",
                    "[kcit]",
                    "n_permutations = 99",
                    "[[estimators]]",
                    'kind = "s-learner"',
                ]
            )
        )
        out_dir = tmp_path / "out"
        code = cli_main([
            "experiment", "rq2", "--config", str(config), "--out", str(out_dir)
        ])
        assert code == 0
        report = json.loads((out_dir / "report.json").read_text())
        assert report["experiment"] == "rq2"
        assert (out_dir / "timings.json").exists()

    def test_scripted_oracle_from_cli(self, tmp_path):
        bench_dir = tmp_path / "bench"
        cli_main(["gen", "--n", "80", "--d", "2", "--seed", "1", "--out", str(bench_dir)])
        n = 80
        script = {
            "replies": [
                {"kind": "var", "reply": '{"name": "community_support", "explanation": "e"}'},
                {"kind": "dist", "reply": '{"distribution": "Normal"}'},
                {"kind": "param", "reply": json.dumps({"parameters": [[0.0, 1.0]] * 50})},
                {"kind": "param", "reply": json.dumps({"parameters": [[0.0, 1.0]] * 30})},
                {"kind": "out", "reply": json.dumps({"counterfactuals": [0.0] * 50})},
                {"kind": "out", "reply": json.dumps({"counterfactuals": [0.0] * 30})},
            ]
        }
        script_path = tmp_path / "script.json"
        script_path.write_text(json.dumps(script))
        run_dir = tmp_path / "run"
        code = cli_main([
            "proci", "--data", str(bench_dir), "--oracle", f"scripted:{script_path}",
            "--max-iterations", "1", "--out", str(run_dir),
        ])
        assert code == 0
        confs = json.loads((run_dir / "confounders.json").read_text())
        assert confs[0]["name"] == "community_support"
