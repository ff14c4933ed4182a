"""Measure and mitigate run-to-run instability of risk-stratification models."""

from .calibration import IsotonicCalibrator, IsotonicModel, apply_isotonic, fit_isotonic
from .data_model import PredictionRecord, Run, RunSet, load_runs, write_runs
from .ensemble import EnsembleSpec, build_ensemble_runset, ensemble_mean
from .evaluation import monthly_evaluate, pr_auc, roc_auc, top_k
from .fairness import representation_range, subgroup_composition
from .pipeline import PipelineConfig, compare_architectures, run_pipeline
from .stability import (
    auc_dispersion,
    jaccard_pair,
    jaccard_topk,
    kendall_tau,
    stability_report,
    weighted_kendall_tau,
)
from .synth import CohortConfig, generate_cohort, solve_intercept
from .trainer import LogisticRiskModel, MLPRiskModel, TrainConfig, predict, train_logistic, train_mlp

__version__ = "0.1.0"
