"""Command-line entry point: ``ieq {synth,prepare,train,evaluate,benchmark}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import config as cfgmod
from .errors import ConfigError, RejectedInputError, TrainingAborted
from .evaluation import (
    MODEL_LABELS, build_report, evaluate, export_series, format_table, persistence_predictions,
    write_table,
)
from .models import FAMILIES, load_checkpoint, recurrent_param_count, save_checkpoint
from .pipeline import Scaler, WindowedDataset, ingest_csv, prepare
from .synthdata import generate
from .training import fit

log = logging.getLogger("ieqforecast")

SPLITS = ("train", "validation", "test")


def _data_dir(cfg) -> Path:
    return cfg.workdir / "data"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_prepared(cfg):
    d = _data_dir(cfg)
    missing = [p for p in [*(d / f"{s}.ieqw" for s in SPLITS), d / "scaler.json"] if not p.exists()]
    if missing:
        raise RejectedInputError(f"prepared artifacts missing ({missing[0]}); run `prepare` first")
    datasets = {s: WindowedDataset.load(d / f"{s}.ieqw") for s in SPLITS}
    return datasets, Scaler.load(d / "scaler.json")


def cmd_synth(cfg, out: Path, truth: Path | None = None) -> Path:
    frame, gt = generate(cfg.synth_config())
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out)
    if truth is not None:
        gt.save(truth)
    return out


def cmd_prepare(cfg) -> dict:
    p = cfg.pipeline
    if cfg.paths.input_csv:
        frame = ingest_csv(cfg.paths.input_csv, p.schema)
        source = str(cfg.paths.input_csv)
    else:
        frame, _ = generate(cfg.synth_config())
        source = "synthetic"
    prepared = prepare(frame, p.max_gap_steps, p.min_segment_length, p.window, p.horizon,
                       p.split, p.utc_offset_seconds)
    d = _data_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    prepared.train.save(d / "train.ieqw")
    prepared.validation.save(d / "validation.ieqw")
    prepared.test.save(d / "test.ieqw")
    prepared.scaler.save(d / "scaler.json")
    report = {"source": source, **prepared.report}
    _write_json(d / "prepare_report.json", report)
    return report


def cmd_train(cfg, family: str | None = None):
    datasets, _ = load_prepared(cfg)
    spec = cfg.model_spec(family)
    params, history = fit(spec, datasets["train"], datasets["validation"], cfg.train_config())
    out = cfg.workdir / "models"
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{spec.family}.ckpt"
    save_checkpoint(params, ckpt, {"best_epoch": history.best_epoch, "epochs": len(history),
                                   "shuffle_seed": cfg.seeds.shuffle})
    history.to_csv(out / f"{spec.family}_history.csv")
    return ckpt, history


def cmd_evaluate(cfg, checkpoint: Path | None = None, export: Path | None = None, workers: int = 1):
    datasets, scaler = load_prepared(cfg)
    checkpoint = checkpoint or cfg.workdir / "models" / f"{cfg.model.family}.ckpt"
    if not Path(checkpoint).exists():
        raise RejectedInputError(f"checkpoint not found: {checkpoint}")
    params, header = load_checkpoint(checkpoint)
    seeds = {"shuffle_seed": header.get("extra", {}).get("shuffle_seed")}
    report = evaluate(params, datasets["test"], scaler, workers, seeds)
    out = cfg.workdir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / f"{params.spec.family}_metrics.json")
    if export is not None:
        export_series(params, datasets["test"], scaler, export, workers)
    return report


def cmd_benchmark(cfg, workers: int = 1) -> dict:
    """Train and evaluate every family under one config; returns reports by family."""
    datasets, scaler = load_prepared(cfg)
    out = cfg.workdir / "benchmark"
    out.mkdir(parents=True, exist_ok=True)
    reports, runs, failures = {}, [], {}
    for family in FAMILIES:
        spec = cfg.model_spec(family)
        started = time.perf_counter()
        try:
            params, history = fit(spec, datasets["train"], datasets["validation"], cfg.train_config())
        except TrainingAborted as exc:
            failures[family] = str(exc)
            log.error("benchmark: %s aborted: %s", family, exc)
            continue
        elapsed = time.perf_counter() - started
        save_checkpoint(params, out / f"{family}.ckpt", {"best_epoch": history.best_epoch})
        history.to_csv(out / f"{family}_history.csv")
        reports[family] = evaluate(params, datasets["test"], scaler, workers,
                                   {"shuffle_seed": cfg.seeds.shuffle})
        reports[family].save(out / f"{family}_metrics.json")
        export_series(params, datasets["test"], scaler, out / f"{family}_series.csv", workers)
        runs.append({
            "model": MODEL_LABELS[family],
            "parameters": params.size,
            "recurrent_parameters": recurrent_param_count(spec),
            "epochs": len(history),
            "best_epoch": history.best_epoch,
            "seconds": elapsed,
            "seconds_per_epoch": sum(r.seconds for r in history.records) / len(history),
        })
        log.info("benchmark: %s done in %.1fs (%d epochs)", family, elapsed, len(history))

    baseline = build_report(persistence_predictions(datasets["test"]), datasets["test"], scaler,
                            "persistence")
    baseline.save(out / "persistence_metrics.json")
    if reports:
        write_table(reports, out / "table.csv")
    with open(out / "models.csv", "w", newline="", encoding="utf-8") as fh:
        cols = ["model", "parameters", "recurrent_parameters", "epochs", "best_epoch",
                "seconds", "seconds_per_epoch"]
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(runs)
    if failures:
        _write_json(out / "failures.json", failures)
        raise TrainingAborted("; ".join(f"{k}: {v}" for k, v in failures.items()))
    return reports


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ieq", description="Indoor environmental quality forecasting toolkit.")
    parser.add_argument("-c", "--config", type=Path, help="JSON run config (all keys optional)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    parser.add_argument("-w", "--workdir", type=Path,
                        help=f"work directory (default: ${cfgmod.WORKDIR_ENV} or ./ieq_work)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic sensor CSV")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--truth", type=Path, help="also write the ground-truth log (JSON)")

    sub.add_parser("prepare", help="preprocess input into windowed train/validation/test sets")

    t = sub.add_parser("train", help="train one model family")
    t.add_argument("--family", choices=FAMILIES)

    e = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--export", type=Path, help="write prediction-vs-truth series CSV")
    e.add_argument("--workers", type=int, default=1)

    b = sub.add_parser("benchmark", help="train and compare all three families")
    b.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg = cfgmod.load(args.config, args.overrides)
        if args.workdir is not None:
            cfg = cfgmod.with_workdir(cfg, args.workdir)
        if stage == "synth":
            print(cmd_synth(cfg, args.out, args.truth))
        elif stage == "prepare":
            report = cmd_prepare(cfg)
            print(f"{report['samples']} samples in {len(report['segments'])} segments "
                  f"({report['train_samples']}/{report['validation_samples']}/{report['test_samples']})")
        elif stage == "train":
            ckpt, history = cmd_train(cfg, args.family)
            print(f"{ckpt}: {len(history)} epochs, best val MAE "
                  f"{min(history.val_mae):.6f} at epoch {history.best_epoch}")
        elif stage == "evaluate":
            report = cmd_evaluate(cfg, args.checkpoint, args.export, args.workers)
            print(json.dumps(report.to_dict()["global"]))
        elif stage == "benchmark":
            reports = cmd_benchmark(cfg, args.workers)
            print(format_table(reports))
    except ConfigError as exc:
        print(f"error [{stage}]: configuration: {exc}", file=sys.stderr)
        return 1
    except (RejectedInputError, OSError) as exc:
        print(f"error [{stage}]: data: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"error [{stage}]: training aborted: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
