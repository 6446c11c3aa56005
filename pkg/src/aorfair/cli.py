"""Command-line entry point: ``aorfair <subcommand> ...``.

Exit codes: 0 success, 1 config or input error, 2 run failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import DatasetError, export_feature_csv, ingest_feature_csv
from .experiment import (ExperimentConfig, ReportParseError, load_config, manifest_failed,
                         render_histograms, run_experiment, seed_data, sweep_lambda)
from .fairmetrics import build_report, validate_report
from .model import CheckpointError, ConfigError, load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("aorfair")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg.validate()


def cmd_validate_config(args) -> int:
    cfg = _config(args)
    print(json.dumps({"config_hash": cfg.config_hash(), "config": cfg.semantic_dict()}, indent=2))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if isinstance(cfg.dataset, str):
        raise ConfigError("gen-data needs a generated dataset, not a CSV path")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        data = seed_data(cfg, seed)
        for name, ds in (("train", data.train), ("val", data.val), ("external", data.external)):
            path = export_feature_csv(ds, out / f"seed_{seed}_{name}.csv")
            log.info("wrote %s (%d rows)", path, len(ds))
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = run_experiment(_config(args))
    return EXIT_RUN if manifest_failed(manifest) else EXIT_OK


def cmd_sweep(args) -> int:
    result = sweep_lambda(_config(args))
    for row in result["summary"]:
        log.info("lambda %-6g group PCC mean %.4f [%.4f, %.4f]  accuracy mean %.4f", row["lambda"],
                 row["group_pcc_mean"], row["group_pcc_min"], row["group_pcc_max"], row["accuracy_mean"])
    log.info("best lambda %s, monotone ordering %s", result["best_lambda"], result["monotone_ordering"])
    return EXIT_RUN if result["failed_runs"] else EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = ingest_feature_csv(args.data)
    if not ds.has_task_labels:
        raise ConfigError(f"{args.data} has no 'y' column")
    report = build_report(model, ds, args.per_cell, args.repeats, args.seed or 0)
    validate_report(report.to_dict())
    if args.out:
        report.write_json(args.out)
        log.info("wrote %s", args.out)
    else:
        sys.stdout.write(report.to_json())
    return EXIT_OK


def cmd_plot(args) -> int:
    render_histograms(args.report, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="only log errors")
    p = argparse.ArgumentParser(prog="aorfair", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, func, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.add_argument("--config", required=True, help="TOML or JSON experiment config")
        sp.add_argument("--out", help="override output_dir")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        sp.set_defaults(func=func)

    with_config("gen-data", cmd_gen_data, "write generated train/val/external CSVs")
    with_config("train", cmd_train, "stage A + stage B for every (lambda, seed)")
    with_config("sweep", cmd_sweep, "train and aggregate a lambda sweep")
    with_config("validate-config", cmd_validate_config, "check a config and print its hash")

    ev = sub.add_parser("evaluate", help="fairness report for a checkpoint on a CSV", parents=[common])
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="feature CSV with g and y columns")
    ev.add_argument("--out", help="report path (stdout when omitted)")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--per-cell", type=int, default=21)
    ev.add_argument("--repeats", type=int, default=10)
    ev.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("plot", help="render report histograms to SVG", parents=[common])
    pl.add_argument("--report", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ReportParseError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as e:
        log.error("%s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
