"""End-to-end stability study: synth -> train x N -> calibrate -> evaluate ->
stability -> ensemble -> fairness, with every intermediate written to disk.

All seeds derive from the root seed: the cohort uses
``derive_seed(root, "cohort")`` and run ``i`` of model family ``f`` uses
``derive_seed(root, "train", f, i)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from . import _rng
from .calibration import apply_isotonic, fit_isotonic, save_isotonic
from .data_model import Run, RunSet, load_runs, write_run
from .ensemble import build_ensemble_runset
from .evaluation import aggregated_metrics, monthly_evaluate
from .exceptions import ConfigError, StageError
from .fairness import fairness_report
from .stability import jaccard_curve_rows, risk_scatter_rows, stability_report
from .synth import Cohort, CohortConfig, generate_cohort, load_cohort, read_key_values, save_cohort
from .trainer import DESK_ARCHITECTURE, TrainConfig, make_model, predict, save_model

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
DEFAULT_K_GRID = (10, 30, 100, 300, 1000)


def benchmark_mlp_config() -> TrainConfig:
    return TrainConfig(
        architecture=DESK_ARCHITECTURE,
        dropout_rate=0.1,
        batch_size=512,
        learning_rate=5e-3,
        lr_decay=0.6,
        epochs=6,
    )


def benchmark_lr_config() -> TrainConfig:
    return TrainConfig(
        architecture=(),
        dropout_rate=0.0,
        batch_size=512,
        learning_rate=0.02,
        lr_decay=0.8,
        l2=1e-6,
        epochs=15,
    )


@dataclass
class PipelineConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    train: TrainConfig = field(default_factory=benchmark_mlp_config)
    lr_train: TrainConfig = field(default_factory=benchmark_lr_config)
    n_runs: int = 10
    ensemble: tuple | None = (10, 10)  # (groups N, members M)
    ensemble_partition: str = "strided"
    k_grid: tuple = DEFAULT_K_GRID
    attributes: tuple = ("gender", "race")
    model: str = "mlp"
    seed: int = 0
    jobs: int = 1
    out_dir: str = "stability_out"

    def __post_init__(self):
        self.k_grid = tuple(int(k) for k in self.k_grid)
        self.attributes = tuple(self.attributes)
        if self.ensemble is not None:
            self.ensemble = tuple(int(v) for v in self.ensemble)
        self.validate()

    def validate(self):
        if self.n_runs < 2:
            raise ConfigError("n_runs must be at least 2")
        if not self.k_grid or any(k < 1 for k in self.k_grid):
            raise ConfigError("k_grid must contain positive integers")
        if list(self.k_grid) != sorted(set(self.k_grid)):
            raise ConfigError("k_grid must be strictly ascending")
        if self.ensemble is not None:
            if len(self.ensemble) != 2 or min(self.ensemble) < 1:
                raise ConfigError("ensemble must be (groups, members) with positive values")
            if self.ensemble[0] < 2:
                raise ConfigError("ensemble needs at least two groups for stability analysis")
        if self.model not in ("lr", "mlp"):
            raise ConfigError("model must be 'lr' or 'mlp'")
        if set(self.attributes) - {"gender", "race"}:
            raise ConfigError("attributes must be drawn from gender, race")
        if self.jobs < 1:
            raise ConfigError("jobs must be positive")
        self.cohort.validate()
        self.train.validate()
        self.lr_train.validate()

    def to_dict(self):
        d = {
            "cohort": self.cohort.to_dict(),
            "train": _config_dict(self.train),
            "lr_train": _config_dict(self.lr_train),
            "n_runs": self.n_runs,
            "ensemble": list(self.ensemble) if self.ensemble else None,
            "ensemble_partition": self.ensemble_partition,
            "k_grid": list(self.k_grid),
            "attributes": list(self.attributes),
            "model": self.model,
            "seed": self.seed,
        }
        return d


def _config_dict(cfg: TrainConfig):
    d = asdict(cfg)
    d["architecture"] = list(cfg.architecture)
    return d


def load_pipeline_config(path, **overrides) -> PipelineConfig:
    """Read a sectioned key=value file: [pipeline], [cohort], [train], [lr_train]."""
    sections = {}
    for name in ("pipeline", "cohort", "train", "lr_train"):
        values = read_key_values(path, name) if _has_section(path, name) else {}
        sections[name] = values
    kw = dict(sections["pipeline"])
    base = PipelineConfig.__dataclass_fields__
    unknown = set(kw) - set(base) - {"ensemble_groups", "ensemble_members"}
    if unknown:
        raise ConfigError(f"unknown pipeline keys: {sorted(unknown)}")
    if "ensemble_groups" in kw or "ensemble_members" in kw:
        kw["ensemble"] = (kw.pop("ensemble_groups", 10), kw.pop("ensemble_members", 10))
    if isinstance(kw.get("k_grid"), str):
        kw["k_grid"] = [int(k) for k in kw["k_grid"].split(",") if k]
    if sections["cohort"]:
        kw["cohort"] = CohortConfig.from_dict(sections["cohort"])
    if sections["train"]:
        kw["train"] = TrainConfig.from_dict({**_config_dict(benchmark_mlp_config()), **sections["train"]})
    if sections["lr_train"]:
        kw["lr_train"] = TrainConfig.from_dict({**_config_dict(benchmark_lr_config()), **sections["lr_train"]})
    kw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _has_section(path, name):
    text = Path(path).read_text(encoding="utf-8")
    return f"[{name}]" in text


# ---------------------------------------------------------------------------
# stages


def _family_train_config(config: PipelineConfig, family: str) -> TrainConfig:
    return config.lr_train if family == "lr" else config.train


def run_id(family: str, index: int) -> str:
    return f"{family}_{index:03d}"


def _split_run(cohort: Cohort, split: str, rid: str, scores) -> Run:
    idx = np.flatnonzero(cohort.split_mask(split))
    pat = cohort.example_patient[idx]
    return Run(
        rid,
        cohort.patient_ids[pat],
        cohort.example_month[idx],
        scores,
        None,
        cohort.labels[idx],
        cohort.gender[pat],
        cohort.race[pat],
    )


def _train_one(cohort: Cohort, family: str, index: int, cfg: TrainConfig, root_seed: int, out: Path):
    rid = run_id(family, index)
    seed = _rng.derive_seed(root_seed, "train", family, index)
    X, y, _ = cohort.examples("train")
    Xv, yv, _ = cohort.examples("validation")
    Xt, _, _ = cohort.examples("test")
    started = time.perf_counter()
    model = make_model(family, replace(cfg, seed=seed)).fit(X, y, Xv, yv)
    seconds = time.perf_counter() - started
    save_model(model, out / "models" / family / f"{rid}.bin")

    val = _split_run(cohort, "validation", rid, predict(model, Xv))
    test = _split_run(cohort, "test", rid, predict(model, Xt))
    iso = fit_isotonic(val.raw_score, val.labels)
    save_isotonic(iso, out / "calibrators" / family / f"{rid}.csv")
    val = val.with_scores(calibrated_risk=apply_isotonic(iso, val.raw_score))
    test = test.with_scores(calibrated_risk=apply_isotonic(iso, test.raw_score))
    base = out / "predictions" / family
    write_run(val, base / "validation" / f"{rid}.csv")
    write_run(test, base / "test" / f"{rid}.csv")
    return {
        "run_id": rid,
        "seed": seed,
        "loss_curve": [float(v) for v in model.loss_curve_],
        "validation_loss_curve": [float(v) for v in model.validation_loss_curve_],
        "_seconds": seconds,
    }


def _performance(run_set: RunSet) -> dict:
    per_run = []
    for run in run_set:
        monthly = monthly_evaluate(run)
        agg = aggregated_metrics(run)
        per_run.append(
            {
                "run_id": run.run_id,
                "aggregated": {k: _num(v) for k, v in agg.items()},
                "monthly": {
                    "mean_roc_auc": _num(monthly.mean_roc_auc),
                    "mean_pr_auc": _num(monthly.mean_pr_auc),
                    "n_months": len(monthly.months),
                    "n_roc_auc_months": monthly.n_roc_months,
                    "n_pr_auc_months": monthly.n_pr_months,
                },
            }
        )

    def mean(path):
        vals = [r[path[0]][path[1]] for r in per_run if r[path[0]][path[1]] is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "per_run": per_run,
        "mean": {
            "aggregated_roc_auc": mean(("aggregated", "roc_auc")),
            "aggregated_pr_auc": mean(("aggregated", "pr_auc")),
            "monthly_roc_auc": mean(("monthly", "mean_roc_auc")),
            "monthly_pr_auc": mean(("monthly", "mean_pr_auc")),
        },
    }


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def _analyse(run_set: RunSet, config: PipelineConfig) -> dict:
    stab = stability_report(run_set, config.k_grid)
    return {
        "status": "ok",
        "run_ids": run_set.run_ids,
        "performance": _performance(run_set),
        "stability": stab.to_dict(),
        "fairness": fairness_report(run_set, config.k_grid, config.attributes),
        "_stability_obj": stab,
    }


def _write_csv(path: Path, rows: list[dict], columns):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in row.items()})


@dataclass
class PipelineResult:
    report: dict
    stability: dict  # family -> StabilityReport
    out_dir: Path
    run_sets: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


class _Stages:
    def __init__(self, out: Path):
        self.out = out
        self.current = None
        self.started = None
        self.timings = {}

    def __call__(self, name):
        now = time.perf_counter()
        if self.current is not None:
            self.timings[self.current] = self.timings.get(self.current, 0.0) + now - self.started
        self.current, self.started = name, now
        log.info("stage %s", name)
        return self

    def fail(self, exc):
        marker = self.out / "FAILED"
        marker.write_text(f"stage: {self.current}\nerror: {exc}\n\n{traceback.format_exc()}")


def _train_family(cohort, family, n_train, config, out):
    cfg = _family_train_config(config, family)
    jobs = Parallel(n_jobs=config.jobs)(
        delayed(_train_one)(cohort, family, i, cfg, config.seed, out) for i in range(n_train)
    )
    return jobs


def _execute(config: PipelineConfig, families, with_ensemble, tolerate_failures) -> PipelineResult:
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    stage = _Stages(out)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": config.to_dict(),
        "families": {},
    }
    stability = {}
    run_sets = {}
    try:
        stage("synth")
        cohort_cfg = replace(config.cohort, seed=_rng.derive_seed(config.seed, "cohort"))
        save_cohort(generate_cohort(cohort_cfg), out / "cohort")
        cohort = load_cohort(out / "cohort")
        report["cohort"] = _cohort_summary(cohort)
    except Exception as exc:
        stage.fail(exc)
        raise StageError(stage.current, exc) from exc

    plot_rows, fair_rows = [], []
    train_seconds = {}
    for family in families:
        n_train = config.n_runs
        if family == "mlp" and with_ensemble:
            n_train = max(n_train, config.ensemble[0] * config.ensemble[1])
        derived = ["mlp_ensemble"] if family == "mlp" and with_ensemble else []
        try:
            stage(f"train:{family}")
            training = _train_family(cohort, family, n_train, config, out)
            train_seconds[family] = [t.pop("_seconds") for t in training]
            test_dir = out / "predictions" / family / "test"
            stage(f"analyse:{family}")
            members = load_runs([test_dir / f"{run_id(family, i)}.csv" for i in range(n_train)])
            singles = RunSet(members.runs[: config.n_runs])
            res = _analyse(singles, config)
            res["training"] = training[: config.n_runs]
            run_sets[family] = singles
            if derived:
                stage("ensemble")
                n, m = config.ensemble
                ens = build_ensemble_runset(members, n, m, config.ensemble_partition)
                ens_dir = out / "predictions" / "mlp_ensemble" / "test"
                for run in ens:
                    write_run(run, ens_dir / f"{run.run_id}.csv")
                ens = load_runs([ens_dir / f"{rid}.csv" for rid in ens.run_ids])
                stage("analyse:mlp_ensemble")
                eres = _analyse(ens, config)
                eres["members"] = {"groups": n, "members": m, "partition": config.ensemble_partition}
                run_sets["mlp_ensemble"] = ens
        except Exception as exc:
            stage.fail(exc)
            if not tolerate_failures:
                raise StageError(stage.current, exc) from exc
            log.error("family %s failed at %s: %s", family, stage.current, exc)
            report["families"][family] = {"status": "failed", "stage": stage.current, "error": str(exc)}
            for d in derived:
                report["families"][d] = {"status": "failed", "stage": stage.current, "error": str(exc)}
            continue
        for name, r in [(family, res)] + ([("mlp_ensemble", eres)] if derived else []):
            stab = r.pop("_stability_obj")
            stability[name] = stab
            report["families"][name] = r
            plot_rows.extend(jaccard_curve_rows(stab, name))
            fair_rows.extend({"family": name, **row} for row in r["fairness"])
            _write_csv(
                out / "plots" / f"risk_scatter_{name}.csv",
                risk_scatter_rows(run_sets[name]),
                ("patient_id", "month", "run_a", "run_b", "risk_a", "risk_b"),
            )

    stage("report")
    _write_csv(out / "plots" / "jaccard_curve.csv", plot_rows, ("family", "k", "mean", "std_over_months"))
    _write_csv(
        out / "plots" / "fairness_ranges.csv",
        fair_rows,
        ("family", "attribute", "group", "k", "aggregation", "min", "max", "range"),
    )
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"
    (out / "report.json").write_text(text, encoding="utf-8")
    stage("done")
    # wall-clock data stays out of report.json, which must be reproducible byte for byte
    timings = {"stages": stage.timings, "train_seconds": train_seconds}
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    if any(f.get("status") == "failed" for f in report["families"].values()):
        log.warning("partial report written to %s", out / "report.json")
    return PipelineResult(report, stability, out, run_sets, timings)


def _cohort_summary(cohort: Cohort) -> dict:
    out = {
        "n_patients": int(len(cohort.patient_ids)),
        "n_examples": int(cohort.n_examples),
        "n_slots": int(cohort.X.shape[1]),
        "prevalence": float(cohort.prevalence()),
        "intercept": float(cohort.intercept),
        "splits": {},
    }
    for split in ("train", "validation", "test"):
        mask = cohort.split_mask(split)
        out["splits"][split] = {
            "patients": int(np.count_nonzero(cohort.split == split)),
            "examples": int(mask.sum()),
            "positives": int(cohort.labels[mask].sum()),
        }
    return out


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Study one model family (``config.model``), plus its ensemble when configured."""
    with_ensemble = config.model == "mlp" and config.ensemble is not None
    return _execute(config, (config.model,), with_ensemble, tolerate_failures=False)


def compare_architectures(config: PipelineConfig) -> PipelineResult:
    """LR, MLP and ensembled MLP on the same cohort and seeds, in one report.

    A failing family is recorded in the report instead of aborting the others.
    """
    if config.ensemble is None:
        config = replace(config, ensemble=(config.n_runs, 10))
    return _execute(config, ("lr", "mlp"), True, tolerate_failures=True)
