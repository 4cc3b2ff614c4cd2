"""Command-line interface: data generation, the loop, fitting, experiments.

Configuration files are TOML or JSON; command-line flags override file
values. Live chat-completion oracles are opt-in via ``--oracle http:<url>``
plus an ``[oracle]`` config section; every test and experiment default uses
scripted oracles. API keys are only ever read from the environment variable
named in the config, never from flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import TwinsStyleSpec, generate_twins_style, read_benchmark, write_benchmark
from .data import load_dataset_csv
from .estimators import EstimatorConfig, TarnetSpec, fit_estimator, predict_cate, save_model
from .harness import (
    EstimatorPlan,
    ExperimentConfig,
    OracleSpec,
    run_rq1,
    run_rq2,
    run_rq3,
    run_rq4,
)
from .kernels import KcitConfig, kcit_pvalue
from .loop import ProciConfig, run_proci, write_run_dir
from .metrics import EffectEstimates, metric_report
from .oracle import BenchmarkOracle, OracleConfig, ScriptedOracle, Transcript


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if path.endswith(".json"):
        return json.loads(text)
    try:
        import tomllib  # py311+
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(text)


def _kcit_from(doc: dict, args) -> KcitConfig:
    section = doc.get("kcit", {})
    kwargs = {
        "gamma": section.get("gamma", 1e-3),
        "alpha": section.get("alpha", 0.05),
        "n_permutations": section.get("n_permutations", 199),
        "seed": section.get("seed", getattr(args, "seed", 0) or 0),
    }
    if "bandwidth" in section:
        kwargs["bandwidth_rule"] = float(section["bandwidth"])
    return KcitConfig(**kwargs)


def _generator_from(doc: dict, args) -> TwinsStyleSpec | str:
    section = doc.get("dataset", {})
    if "benchmark_dir" in section:
        return section["benchmark_dir"]
    return TwinsStyleSpec(
        n=int(section.get("n", getattr(args, "n", None) or 600)),
        d=int(section.get("d", getattr(args, "d", None) or 6)),
        proxy_levels=int(section.get("proxy_levels", 10)),
        noise_sd=float(section.get("noise_sd", 0.5)),
        seed=int(section.get("seed", getattr(args, "seed", 0) or 0)),
        hide_proxy=bool(section.get("hide_proxy", True)),
    )


def _plans_from(doc: dict) -> tuple[EstimatorPlan, ...]:
    plans = []
    for entry in doc.get("estimators", [{"kind": "tarnet"}]):
        cfg_kwargs = {
            k: entry[k]
            for k in (
                "learning_rate",
                "batch_size",
                "balance_weight",
                "max_epochs",
                "patience",
                "ridge_penalty",
                "sinkhorn_epsilon",
                "sinkhorn_iters",
            )
            if k in entry
        }
        spec_kwargs = {}
        if "encoder_widths" in entry:
            spec_kwargs["encoder_widths"] = tuple(entry["encoder_widths"])
        if "head_widths" in entry:
            spec_kwargs["head_widths"] = tuple(entry["head_widths"])
        plans.append(
            EstimatorPlan(
                kind=entry["kind"],
                grid=dict(entry.get("grid", {})),
                config=EstimatorConfig(**cfg_kwargs),
                spec=TarnetSpec(**spec_kwargs),
            )
        )
    return tuple(plans)


def _experiment_config(args) -> ExperimentConfig:
    doc = _read_config(args.config)
    proci_section = doc.get("proci", {})
    oracle_source = args.oracle or proci_section.get("oracle", "rule:truth-revealing")
    seeds = args.seeds or doc.get("seeds", [0, 1, 2])
    kwargs = {}
    for key in ("removal_counts", "split_ratios"):
        if key in doc:
            kwargs[key] = tuple(doc[key])
    return ExperimentConfig(
        generator=_generator_from(doc, args),
        estimators=_plans_from(doc),
        seeds=tuple(int(s) for s in seeds),
        proci_enabled=bool(proci_section.get("enabled", True)),
        oracle=OracleSpec(source=oracle_source, constant=float(proci_section.get("constant", 0.0))),
        kcit=_kcit_from(doc, args),
        max_iterations=int(proci_section.get("max_iterations", 5)),
        workers=int(args.workers or doc.get("workers", 1)),
        fixed_k=int(proci_section.get("fixed_k", 1)),
        cmi_neighbors=int(doc.get("cmi_neighbors", 5)),
        include_sqrt_pehe=bool(doc.get("sqrt_pehe", False) or getattr(args, "sqrt_pehe", False)),
        **kwargs,
    )


def _resolve_cli_oracle(source: str, bench, seed: int, doc: dict):
    scheme, _, rest = source.partition(":")
    if scheme == "rule":
        if bench is None:
            raise SystemExit("rule oracles need a generated benchmark (use gen first)")
        return BenchmarkOracle(bench, rest, seed=seed)
    if scheme == "scripted":
        return ScriptedOracle.from_file(rest)
    if scheme == "http":
        section = doc.get("oracle", {})
        return OracleConfig(
            endpoint_url=rest,
            model_name=section.get("model", "default"),
            temperature=float(section.get("temperature", 0.7)),
            batch_size=int(section.get("batch_size", 50)),
            max_retries=int(section.get("max_retries", 3)),
            timeout=float(section.get("timeout", 60.0)),
            api_key_env=section.get("api_key_env", "ORACLE_API_KEY"),
        )
    raise SystemExit(f"unknown oracle source {source!r}")


def _load_observational(args):
    """Dataset plus (optionally) its benchmark wrapper from --data."""
    path = Path(args.data)
    if path.is_dir():
        bench = read_benchmark(path)
        return bench.base, bench
    ds = load_dataset_csv(
        path,
        treatment_column=args.treatment_col,
        outcome_column=args.outcome_col,
        sidecar=args.sidecar,
    )
    return ds, None


def _cmd_gen(args) -> int:
    doc = _read_config(args.config)
    spec = _generator_from(doc, args)
    if isinstance(spec, str):
        raise SystemExit("gen needs generator parameters, not a benchmark_dir")
    bench = generate_twins_style(spec)
    write_benchmark(bench, args.out)
    print(f"wrote benchmark (n={bench.base.n_units}, d={bench.base.n_covariates}) to {args.out}")
    return 0


def _cmd_proci(args) -> int:
    doc = _read_config(args.config)
    ds, bench = _load_observational(args)
    oracle = _resolve_cli_oracle(args.oracle, bench, args.seed, doc)
    cfg = ProciConfig(
        kcit=_kcit_from(doc, args),
        oracle=oracle,
        max_iterations=int(doc.get("proci", {}).get("max_iterations", args.max_iterations)),
        seed=args.seed,
    )
    transcript = Transcript()
    result = run_proci(ds, cfg, transcript=transcript, precheck=args.precheck)
    write_run_dir(result, args.out, transcript=transcript)
    print(json.dumps(result.to_summary(), indent=2, sort_keys=True))
    return 0 if result.termination != "oracle_failure" else 1


def _cmd_fit(args) -> int:
    doc = _read_config(args.config)
    ds, bench = _load_observational(args)
    plans = _plans_from(doc) if "estimators" in doc else (EstimatorPlan(kind=args.estimator),)
    plan = next((p for p in plans if p.kind == args.estimator), plans[0])
    spec = replace(plan.spec, seed=args.seed)
    model = fit_estimator(args.estimator, ds, plan.config, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json")
    tau = predict_cate(model, ds.covariates)
    np.savetxt(out / "tau_hat.csv", tau, header="tau_hat", comments="")
    summary = {"estimator": args.estimator, "mean_tau_hat": float(tau.mean())}
    if bench is not None:
        summary["metrics"] = metric_report(bench, EffectEstimates(tau_hat=tau))
    (out / "fit.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    runner = {"rq1": run_rq1, "rq2": run_rq2, "rq3": run_rq3, "rq4": run_rq4}[args.which]
    report = runner(cfg)
    if args.out:
        report.write(args.out)
        print(f"wrote {args.which} report to {args.out}/report.json")
    else:
        print(report.to_json())
    return 0


def _cmd_kcit(args) -> int:
    doc = _read_config(args.config)
    ds, _ = _load_observational(args)
    po_rows = np.loadtxt(args.po, delimiter=",", skiprows=1)
    y_block = po_rows[:, :2]
    if y_block.shape[0] != ds.n_units:
        raise SystemExit("potential-outcome table length does not match dataset")
    cfg = _kcit_from(doc, args)
    result = kcit_pvalue(y_block, ds.treatments.astype(float), ds.covariates, cfg)
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return 0 if result.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proci",
        description="Progressive confounder imputation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required: bool):
        p.add_argument("--config", help="TOML or JSON configuration file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--data", required=True, help="benchmark directory or CSV file")
        p.add_argument("--treatment-col", default="treatment")
        p.add_argument("--outcome-col", default="outcome")
        p.add_argument("--sidecar", help="JSON metadata sidecar for CSV data")

    p_gen = sub.add_parser("gen", help="generate a synthetic benchmark")
    p_gen.add_argument("--config")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--n", type=int)
    p_gen.add_argument("--d", type=int)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_gen)

    p_loop = sub.add_parser("proci", help="run the progressive loop")
    common(p_loop, out_required=True)
    p_loop.add_argument(
        "--oracle",
        default="rule:truth-revealing",
        help="rule:<name>, scripted:<path>, or http:<url>",
    )
    p_loop.add_argument("--max-iterations", type=int, default=5)
    p_loop.add_argument("--precheck", action="store_true")
    p_loop.set_defaults(func=_cmd_proci)

    p_fit = sub.add_parser("fit", help="fit a single estimator")
    common(p_fit, out_required=True)
    p_fit.add_argument(
        "--estimator",
        required=True,
        choices=("s-learner", "psm", "tarnet", "cfr-wass"),
    )
    p_fit.set_defaults(func=_cmd_fit)

    p_exp = sub.add_parser("experiment", help="run a configured study")
    p_exp.add_argument("which", choices=("rq1", "rq2", "rq3", "rq4"))
    p_exp.add_argument("--config")
    p_exp.add_argument("--seeds", type=int, nargs="*")
    p_exp.add_argument("--oracle")
    p_exp.add_argument("--workers", type=int)
    p_exp.add_argument("--out")
    p_exp.add_argument("--sqrt-pehe", action="store_true", dest="sqrt_pehe")
    p_exp.set_defaults(func=_cmd_experiment)

    p_kcit = sub.add_parser("kcit", help="standalone independence test on CSV data")
    common(p_kcit, out_required=False)
    p_kcit.add_argument("--po", required=True, help="potential-outcome table CSV")
    p_kcit.set_defaults(func=_cmd_kcit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
