"""Command-line entry point: benchmark runs, theory checks, and report-data
export.

Configuration is a flat key = value file (see README for the schema);
command-line flags override file values, and the effective configuration is
echoed into the run manifest.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backend import SimulatedBackend, SimulatedProfile, ScoreDistribution, WireBackend
from .core import ConfigurationError, EngineError, SimilarityLevel, Threshold
from .harness import GROUPINGS, GridConfig, aggregate, unit_key_for_record
from .memory import MemoryMethod
from .persistence import (
    CorpusError,
    ExperimentRunner,
    StateMismatchError,
    load_corpus,
    read_records,
    write_aggregates,
)
from .strategies import StrategyConfig, StrategyKind
from .theory import (
    chain_dag,
    two_root_dag,
    verify_independent_tail_grid,
    verify_lemma_sweep,
    verify_theorem1,
    verify_theorem2_dag,
)

CONFIG_DEFAULTS: dict[str, str] = {
    "corpus": "",
    "out_dir": "run_out",
    "backend": "simulated",
    "strategies": "best_of_n",
    "memory_methods": "none",
    "similarity_levels": "S1,S2,S3,S4",
    "repetitions": "4",
    "question_sets": "10",
    "seed": "0",
    "method_evaluate": "value",
    # strategy knobs (applied to every listed strategy)
    "value_thresh": "0.9",
    "n_generate_sample": "5",
    "num_iteration": "15",
    "max_depth": "15",
    "max_node": "50",
    "branching": "3",
    "prune_ratio": "0.4",
    "max_tokens": "3500",
    "cot_checkpoint": "256",
    "batch_size": "1",
    # simulated profile
    "base_success": "0.5",
    "memory_gain": "0.0",
    "base_stop": "0.5",
    "stop_alpha": "0.0",
    "success_score": "1.0",
    "failure_score_high": "0.9",
    "profile_seed": "0",
    "weight_s1": "1.0",
    "weight_s2": "0.9",
    "weight_s3": "0.6",
    "weight_s4": "0.3",
    # wire backend
    "base_url": "http://localhost:8000",
    "model": "",
    "judge_model": "",
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key = value lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_DEFAULTS:
            raise ConfigurationError(f"{path}:{lineno}: unknown config key '{key}'")
        values[key] = value
    return values


def effective_config(args: argparse.Namespace) -> dict[str, str]:
    config = dict(CONFIG_DEFAULTS)
    if args.config:
        config.update(parse_config_file(args.config))
    flag_map = {
        "seed": args.seed,
        "out_dir": args.out,
        "n_generate_sample": args.n_generate_sample,
        "method_evaluate": args.method_evaluate,
        "value_thresh": args.value_thresh,
        "num_iteration": args.num_iteration,
        "max_depth": args.max_depth,
        "max_node": args.max_node,
    }
    for key, value in flag_map.items():
        if value is not None:
            config[key] = str(value)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got '{item}'")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in CONFIG_DEFAULTS:
            raise ConfigurationError(f"--set: unknown config key '{key}'")
        config[key] = value
    return config


def _parse_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def build_grid(config: dict[str, str]) -> GridConfig:
    if not config["corpus"]:
        raise ConfigurationError("config must name a corpus file")
    corpus = load_corpus(config["corpus"])
    try:
        kinds = [StrategyKind(k) for k in _parse_list(config["strategies"])]
        memory_methods = [MemoryMethod(m) for m in _parse_list(config["memory_methods"])]
        levels = [SimilarityLevel(s) for s in _parse_list(config["similarity_levels"])]
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    strategy_configs = tuple(
        StrategyConfig(
            kind=kind,
            tau=Threshold(float(config["value_thresh"])),
            n_max=int(config["n_generate_sample"]),
            max_iterations=int(config["num_iteration"]),
            max_depth=int(config["max_depth"]),
            max_node=int(config["max_node"]),
            branching=int(config["branching"]),
            prune_ratio=float(config["prune_ratio"]),
            max_tokens=int(config["max_tokens"]),
            cot_checkpoint=int(config["cot_checkpoint"]),
            batch_size=int(config["batch_size"]),
        )
        for kind in kinds
    )
    if config["backend"] == "simulated":
        profile = SimulatedProfile(
            base_success=float(config["base_success"]),
            memory_gain=float(config["memory_gain"]),
            base_stop=float(config["base_stop"]),
            stop_alpha=float(config["stop_alpha"]),
            score_given_success=ScoreDistribution.point(float(config["success_score"])),
            score_given_failure=ScoreDistribution.uniform(
                0.0, float(config["failure_score_high"])
            ),
            relevance_weights={
                SimilarityLevel.S1: float(config["weight_s1"]),
                SimilarityLevel.S2: float(config["weight_s2"]),
                SimilarityLevel.S3: float(config["weight_s3"]),
                SimilarityLevel.S4: float(config["weight_s4"]),
            },
            seed=int(config["profile_seed"]),
        )
        backend = SimulatedBackend(profile)
    elif config["backend"] == "wire":
        if not config["model"]:
            raise ConfigurationError("wire backend requires a model name")
        backend = WireBackend(
            base_url=config["base_url"],
            model=config["model"],
            judge_model=config["judge_model"] or None,
        )
    else:
        raise ConfigurationError(f"unknown backend '{config['backend']}'")
    return GridConfig(
        strategies=strategy_configs,
        memory_methods=tuple(memory_methods),
        similarity_levels=tuple(levels),
        corpus=corpus,
        backend=backend,
        master_seed=int(config["seed"]),
        repetitions=int(config["repetitions"]),
        question_sets=int(config["question_sets"]),
    )


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = effective_config(args)
        grid = build_grid(config)
    except (EngineError, CorpusError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    workers = args.workers if args.workers else grid.question_sets
    runner = ExperimentRunner(config["out_dir"])
    try:
        records, interrupted = runner.run(
            grid,
            resume=args.resume,
            workers=workers,
            max_units=args.max_units,
            effective_config=config,
        )
    except (StateMismatchError, EngineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    by_unit: dict[str, list] = {}
    for record in records:
        by_unit.setdefault(unit_key_for_record(record), []).append(record)
    aborted = sum(1 for unit_records in by_unit.values() if all(r.failed for r in unit_records))
    if interrupted:
        print(f"interrupted after {len(by_unit)} units; re-run with --resume to finish")
        return 0
    print(f"wrote {len(records)} records to {runner.records_path}")
    print(f"aggregates at {runner.aggregates_path}")
    if by_unit and aborted / len(by_unit) > 0.5:
        print(f"error: backend failures aborted {aborted}/{len(by_unit)} units", file=sys.stderr)
        return 2
    return 0


def cmd_theory_check(args: argparse.Namespace) -> int:
    trials = args.trials
    seed = args.seed or 0
    reports = [
        verify_lemma_sweep(n_cases=1000, seed=seed),
        verify_theorem1([0.2, 0.5, 0.8], n_max=5, trials=trials, seed=seed),
        verify_independent_tail_grid(
            ps=(0.1, 0.3, 0.5, 0.8), ks=(1, 2, 4), trials=trials, seed=seed
        ),
        verify_theorem2_dag(chain_dag(), trials=trials, seed=seed),
        verify_theorem2_dag(two_root_dag(0.3, 0.6), trials=trials, seed=seed),
    ]
    all_passed = True
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        print(f"[{status}] {report.check}")
        for failure in report.failures:
            print(f"    {failure}")
        all_passed &= report.passed
    if args.report:
        with open(args.report, "w") as handle:
            json.dump([r.to_dict() for r in reports], handle, indent=2, sort_keys=True)
        print(f"report written to {args.report}")
    return 0 if all_passed else 1


def cmd_report_data(args: argparse.Namespace) -> int:
    records_path = Path(args.records)
    if not records_path.exists():
        print(f"error: records file not found: {records_path}", file=sys.stderr)
        return 1
    records = read_records(records_path)
    if not records:
        print("error: records file is empty", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for grouping in GROUPINGS:
        views = aggregate(records, grouping)
        write_aggregates(out_dir / f"{grouping}.csv", views)
        print(f"wrote {out_dir / f'{grouping}.csv'} ({len(views)} rows)")
    return 0


def cmd_validate_corpus(args: argparse.Namespace) -> int:
    try:
        corpus = load_corpus(args.path)
    except (CorpusError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{len(corpus.questions)} questions in {len(corpus.sets)} sets")
    for question_set in corpus.sets:
        print(
            f"  {question_set.set_id}: {len(question_set.questions)} questions "
            f"(level {question_set.similarity_level.value})"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttcbench",
        description="Adaptive test-time compute benchmark runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="execute a benchmark grid")
    run_parser.add_argument("--config", required=True, help="key = value config file")
    run_parser.add_argument("--seed", type=int, default=None, help="master seed override")
    run_parser.add_argument("--out", default=None, help="output directory override")
    run_parser.add_argument("--workers", type=int, default=None,
                            help="worker pool size (default: question_sets)")
    run_parser.add_argument("--resume", action="store_true",
                            help="continue a previously interrupted run")
    run_parser.add_argument("--max-units", type=int, default=None,
                            help="stop after this many new units (for testing interrupts)")
    run_parser.add_argument("--n_generate_sample", type=int, default=None)
    run_parser.add_argument("--method_evaluate", default=None)
    run_parser.add_argument("--value_thresh", type=float, default=None)
    run_parser.add_argument("--num_iteration", type=int, default=None)
    run_parser.add_argument("--max_depth", type=int, default=None)
    run_parser.add_argument("--max_node", type=int, default=None)
    run_parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override any config key")
    run_parser.set_defaults(func=cmd_run)

    theory_parser = sub.add_parser("theory-check", help="run the verification suite")
    theory_parser.add_argument("--trials", type=int, default=10_000)
    theory_parser.add_argument("--seed", type=int, default=0)
    theory_parser.add_argument("--report", default=None, help="write JSON reports here")
    theory_parser.set_defaults(func=cmd_theory_check)

    report_parser = sub.add_parser("report-data", help="export aggregate CSVs from records")
    report_parser.add_argument("--records", required=True)
    report_parser.add_argument("--out", required=True)
    report_parser.set_defaults(func=cmd_report_data)

    validate_parser = sub.add_parser("validate-corpus", help="check a corpus file")
    validate_parser.add_argument("path")
    validate_parser.set_defaults(func=cmd_validate_corpus)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
