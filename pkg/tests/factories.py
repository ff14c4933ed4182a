"""Small builders for hand-made runs."""

from __future__ import annotations

import numpy as np

from stabrisk import Run, RunSet
from stabrisk.pipeline import PipelineConfig
from stabrisk.synth import CohortConfig
from stabrisk.trainer import TrainConfig


def make_run(
    run_id,
    scores,
    calibrated=None,
    labels=None,
    months=None,
    patients=None,
    gender=None,
    race=None,
):
    n = len(scores)
    patients = [f"P{i:04d}" for i in range(n)] if patients is None else list(patients)
    months = [120] * n if months is None else list(months)
    labels = [i % 2 for i in range(n)] if labels is None else list(labels)
    gender = ["female" if i % 2 else "male" for i in range(n)] if gender is None else list(gender)
    race = ["white"] * n if race is None else list(race)
    return Run(run_id, patients, months, np.asarray(scores, float), calibrated, labels, gender, race)


def make_runset(score_lists, **kw):
    return RunSet([make_run(f"r{i}", s, **kw) for i, s in enumerate(score_lists)])


def random_runset(rng, n_runs=3, n_patients=40, n_months=3, calibrated=True, noise=0.3):
    """Runs sharing a latent ranking, each perturbed by its own noise."""
    base = rng.normal(size=n_patients * n_months)
    patients = [f"P{i:04d}" for i in range(n_patients)] * n_months
    months = np.repeat(120 + np.arange(n_months), n_patients)
    labels = (rng.random(len(base)) < 0.3).astype(int)
    gender = rng.choice(["female", "male"], size=n_patients).tolist() * n_months
    race = rng.choice(["white", "asian", "black", "other"], size=n_patients).tolist() * n_months
    runs = []
    for r in range(n_runs):
        raw = base + noise * rng.normal(size=len(base))
        cal = 1 / (1 + np.exp(-raw)) if calibrated else None
        runs.append(Run(f"run_{r:03d}", patients, months, raw, cal, labels, gender, race))
    return RunSet(runs)


def tiny_pipeline_config(out_dir, seed=0, n_runs=2, ensemble=(2, 2), **cohort):
    """500 patients over 6 months with a very small network: seconds, not minutes."""
    cohort_kw = dict(n_patients=500, n_months=6, feature_dim=40, target_prevalence=0.02)
    cohort_kw.update(cohort)
    return PipelineConfig(
        cohort=CohortConfig(**cohort_kw),
        train=TrainConfig(architecture=(8, 4), dropout_rate=0.1, batch_size=256, learning_rate=5e-3, epochs=2),
        lr_train=TrainConfig(architecture=(), dropout_rate=0.0, batch_size=256, learning_rate=0.02, epochs=2),
        n_runs=n_runs,
        ensemble=ensemble,
        k_grid=(5, 20),
        seed=seed,
        out_dir=str(out_dir),
    )
