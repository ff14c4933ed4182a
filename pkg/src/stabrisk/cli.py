"""Command-line entry point: ``stabrisk <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import _rng
from .calibration import apply_isotonic, fit_isotonic, save_isotonic
from .data_model import Run, RunSet, load_runs, write_run, write_runs
from .ensemble import build_ensemble_runset, recalibrate
from .evaluation import evaluation_report
from .exceptions import ConfigError, DataError, StabriskError
from .fairness import fairness_report
from .pipeline import (
    DEFAULT_K_GRID,
    PipelineConfig,
    _split_run,
    _write_csv,
    compare_architectures,
    load_pipeline_config,
    run_pipeline,
)
from .stability import jaccard_curve_rows, risk_scatter_rows, stability_report
from .synth import CohortConfig, generate_cohort, load_cohort, load_cohort_config, read_key_values, save_cohort
from .trainer import TrainConfig, load_model, make_model, predict, save_model

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4

log = logging.getLogger("stabrisk")


def _k_grid(text):
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid k grid {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return ks


def _dump_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = load_cohort_config(args.config) if args.config else CohortConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cohort = generate_cohort(cfg)
    out = save_cohort(cohort, args.out_dir or "cohort")
    log.info("wrote %d examples (prevalence %.5f) to %s", cohort.n_examples, cohort.prevalence(), out)


def _train_config(path, model):
    if path is None:
        return TrainConfig()
    text = Path(path).read_text(encoding="utf-8")
    section = "lr_train" if model == "lr" and "[lr_train]" in text else "train"
    return TrainConfig.from_dict(read_key_values(path, section))


def cmd_train(args):
    cfg = _train_config(args.config, args.model)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cohort = load_cohort(args.cohort)
    X, y, _ = cohort.examples("train")
    Xv, yv, _ = cohort.examples("validation")
    model = make_model(args.model, cfg).fit(X, y, Xv, yv)
    save_model(model, args.out)


def cmd_predict(args):
    model = load_model(args.model_file)
    cohort = load_cohort(args.cohort)
    X, _, _ = cohort.examples(args.split)
    run = _split_run(cohort, args.split, args.run_id or Path(args.model_file).stem, predict(model, X))
    write_run(run, args.out)


def cmd_calibrate(args):
    runs = load_runs([args.predictions], min_runs=1)
    if runs.n != 1:
        raise DataError("calibrate expects a single run per predictions file")
    run = runs.reference
    mask = np.ones(len(run), dtype=bool)
    if args.cohort:
        cohort = load_cohort(args.cohort)
        in_split = set(cohort.patient_ids[cohort.split == args.fit_split].tolist())
        mask = np.array([p in in_split for p in run.patient_ids])
        if not mask.any():
            raise DataError(f"no predictions belong to split {args.fit_split!r}")
    model = fit_isotonic(run.raw_score[mask], run.labels[mask])
    save_isotonic(model, args.out)
    for src in args.apply or []:
        for target in load_runs([src], min_runs=1):
            calibrated = target.with_scores(calibrated_risk=apply_isotonic(model, target.raw_score))
            dest = Path(args.apply_dir) / Path(src).name if args.apply_dir else Path(src)
            write_run(calibrated, dest)


def cmd_evaluate(args):
    runs = load_runs([args.predictions], min_runs=1)
    if args.run_id:
        run = runs[args.run_id]
    elif runs.n == 1:
        run = runs.reference
    else:
        raise DataError("file holds several runs; choose one with --run-id")
    _dump_json(evaluation_report(run, monthly=args.monthly or args.k is not None, k=args.k), args.out)


def cmd_stability(args):
    runs = load_runs(args.runs)
    report = stability_report(runs, args.k_grid, per_month_tau=args.per_month_tau)
    _dump_json(report.to_dict(), args.out)
    if args.csv:
        d = Path(args.csv)
        _write_csv(d / "jaccard_curve.csv", jaccard_curve_rows(report, args.family), ("family", "k", "mean", "std_over_months"))
        _write_csv(
            d / "risk_scatter.csv",
            risk_scatter_rows(runs),
            ("patient_id", "month", "run_a", "run_b", "risk_a", "risk_b"),
        )


def cmd_ensemble(args):
    runs = load_runs(args.runs)
    ens = build_ensemble_runset(
        runs, args.groups, args.members, args.partition, args.average_field, args.prefix
    )
    if args.recalibrate:
        if not args.validation_runs:
            raise ConfigError("--recalibrate needs --validation-runs")
        val = build_ensemble_runset(
            load_runs(args.validation_runs), args.groups, args.members, args.partition, args.average_field, args.prefix
        )
        ens = recalibrate(ens, val)
    paths = write_runs(ens, args.out_dir or "ensemble")
    log.info("wrote %d ensemble runs", len(paths))


def cmd_fairness(args):
    attributes = [a.strip() for a in args.attribute.split(",") if a.strip()]
    series = [("members", load_runs(args.runs))]
    if args.ensemble_runs:
        series.append(("ensemble", load_runs(args.ensemble_runs)))
    rows = []
    for name, rs in series:
        rows.extend({"series": name, **r} for r in fairness_report(rs, args.k_grid, attributes, args.per_month))
    _dump_json({"ranges": rows}, args.out)
    if args.csv:
        _write_csv(
            Path(args.csv),
            rows,
            ("series", "attribute", "group", "k", "aggregation", "min", "max", "range"),
        )


def _pipeline_config(args) -> PipelineConfig:
    overrides = {"seed": args.seed, "jobs": args.jobs, "out_dir": args.out_dir}
    if args.config:
        return load_pipeline_config(args.config, **overrides)
    return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_pipeline(args):
    result = run_pipeline(_pipeline_config(args))
    log.info("report written to %s", result.out_dir / "report.json")


def cmd_compare(args):
    result = compare_architectures(_pipeline_config(args))
    log.info("report written to %s", result.out_dir / "report.json")


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel training runs")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="stabrisk", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--model", choices=("lr", "mlp"), required=True)
    p.add_argument("--config")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="score a cohort split with a saved model")
    p.add_argument("--model-file", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--run-id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("calibrate", parents=[common], help="fit an isotonic calibrator")
    p.add_argument("--predictions", required=True)
    p.add_argument("--fit-split", default="validation", choices=("train", "validation", "test"))
    p.add_argument("--cohort", help="restrict fitting rows to --fit-split patients of this cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--apply", nargs="*", help="prediction files to calibrate with the fitted map")
    p.add_argument("--apply-dir", help="write calibrated files here instead of in place")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", parents=[common], help="ROC-AUC / PR-AUC, aggregated and monthly")
    p.add_argument("--predictions", required=True)
    p.add_argument("--run-id")
    p.add_argument("--monthly", action="store_true")
    p.add_argument("--k", type=int)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stability", parents=[common], help="stability metrics over N runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--k-grid", type=_k_grid, default=list(DEFAULT_K_GRID))
    p.add_argument("--per-month-tau", action="store_true")
    p.add_argument("--family", default="runs", help="label used in plot data")
    p.add_argument("--csv", help="directory for plot-data CSVs")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("ensemble", parents=[common], help="average N groups of M member runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--members", type=int, required=True)
    p.add_argument("--groups", type=int, required=True)
    p.add_argument("--partition", choices=("contiguous", "strided"), default="contiguous")
    p.add_argument("--average-field", choices=("calibrated_risk", "raw_score"), default="calibrated_risk")
    p.add_argument("--prefix", default="ens")
    p.add_argument("--recalibrate", action="store_true")
    p.add_argument("--validation-runs", nargs="*")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("fairness", parents=[common], help="subgroup representation ranges")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--ensemble-runs", nargs="*")
    p.add_argument("--k-grid", type=_k_grid, default=list(DEFAULT_K_GRID))
    p.add_argument("--attribute", default="gender,race")
    p.add_argument("--per-month", action="store_true")
    p.add_argument("--csv")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_fairness)

    for name, func, text in (
        ("pipeline", cmd_pipeline, "full study for one model family"),
        ("compare", cmd_compare, "LR vs MLP vs ensembled MLP"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--config")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("seed", "jobs", "out_dir", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StabriskError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
