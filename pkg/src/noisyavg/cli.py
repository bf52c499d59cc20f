"""Command-line entry point: run suites, verification oracles, preset dumps.

Results go to files (or stdout for JSON-producing subcommands); diagnostics
and progress go to stderr.  Exit codes: 0 success, 1 run or oracle failure,
2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import verify
from .experiment import (
    ConfigError, aggregate_stats, config_from_dict, config_to_dict,
    paper_presets, run_suite,
)

VERIFY_CHECKS = (
    "antithetic_lemma",
    "expectation_convergence",
    "gradient_linear",
    "gradient_sigmoid_softmax",
    "gradient_relu_softmax",
    "median_invariance",
)


def _log(message: str):
    print(message, file=sys.stderr)


def _load_config(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return config_from_dict(raw)


def _prepare_output(out_dir: str, force: bool):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "results.csv"
    stats = out / "stats.json"
    if not force:
        for target in (results, stats):
            if target.exists():
                raise ConfigError(
                    f"{target} already exists; pass --force to overwrite"
                )
    return results, stats


def _cmd_run(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config = replace(config, protocol=replace(config.protocol,
                                                  master_seed=args.seed))
    results_path, stats_path = _prepare_output(args.out, args.force)
    _log(f"running suite {config.name!r}: "
         f"{len(config.noise_grid)} noise specs x {config.repetitions} repetitions, "
         f"jobs={args.jobs}")
    suite = run_suite(config, jobs=args.jobs)
    results_path.write_text(suite.to_csv(), encoding="utf-8")
    stats_path.write_text(json.dumps(suite.stats(), indent=2) + "\n",
                          encoding="utf-8")
    failed = sum(1 for row in suite.rows if row["failed"])
    _log(f"wrote {results_path} and {stats_path} "
         f"({len(suite.rows)} runs, {failed} flagged failed)")
    return 0


def _run_check(name: str, seed: int, jobs: int):
    if name == "antithetic_lemma":
        return verify.antithetic_lemma_check(dim=5, rounds=50, batch_size=10,
                                             eta=1e-3, eps=1.0, seed=seed)
    if name == "expectation_convergence":
        return verify.expectation_convergence_check(
            dim=5, rounds=50, batch_size=10, eta=1e-3, eps=1.0, runs=200,
            learners=4, sync_period=5, seed=seed)
    if name.startswith("gradient_"):
        spec, batch = verify.preset_gradient_specs(seed)[name]
        report = verify.gradient_check(spec, batch, seed=seed)
        report.name = name
        return report
    return verify.median_invariance_check(
        verify.desk_linear_config(include_baselines=False), jobs=jobs)


def _cmd_verify(args) -> int:
    names = args.check or list(VERIFY_CHECKS)
    all_passed = True
    for name in names:
        _log(f"check {name} ...")
        report = _run_check(name, args.seed, args.jobs)
        print(json.dumps(report.to_dict()))
        all_passed &= report.passed
    return 0 if all_passed else 1


def _cmd_presets(_args) -> int:
    payload = {name: config_to_dict(cfg) for name, cfg in paper_presets().items()}
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_stats(args) -> int:
    path = Path(args.results)
    if not path.exists():
        raise ConfigError(f"results file {path} does not exist")
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for record in reader:
            rows.append({
                "setup": record["setup"],
                "repetition": int(record["repetition"]),
                "distribution": record["distribution"],
                "noise_level": float(record["noise_level"]),
                "schedule": record["schedule"],
                record["metric"]: float(record["value"]),
                "failed": record["failed"] == "1",
            })
    # merge metric rows belonging to the same run
    merged: dict = {}
    metrics = []
    for row in rows:
        key = (row["setup"], row["repetition"])
        entry = merged.setdefault(key, dict(row))
        entry.update(row)
        for name in row:
            if name in ("test_accuracy", "cumulative_training_loss") and name not in metrics:
                metrics.append(name)
    stats = aggregate_stats(list(merged.values()), tuple(metrics))
    text = json.dumps(stats, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        _log(f"wrote {args.out}")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisyavg",
        description="Decentralized averaging simulator with weight-noise injection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute an experiment suite from a JSON config")
    run_p.add_argument("--config", required=True, help="path to the JSON config")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--seed", type=int, default=None, help="master seed override")
    run_p.add_argument("--jobs", type=int, default=1, help="parallel worker count")
    run_p.add_argument("--force", action="store_true",
                       help="overwrite existing result files")
    run_p.set_defaults(func=_cmd_run)

    verify_p = sub.add_parser("verify", help="run verification oracles (JSON lines)")
    verify_p.add_argument("--check", action="append", choices=VERIFY_CHECKS,
                          help="run only the named check (repeatable)")
    verify_p.add_argument("--seed", type=int, default=0)
    verify_p.add_argument("--jobs", type=int, default=1)
    verify_p.set_defaults(func=_cmd_verify)

    presets_p = sub.add_parser("presets", help="print the reference configs as JSON")
    presets_p.set_defaults(func=_cmd_presets)

    stats_p = sub.add_parser("stats", help="recompute box statistics from a results CSV")
    stats_p.add_argument("--results", required=True, help="path to results.csv")
    stats_p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    stats_p.set_defaults(func=_cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return 2
    except (ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
