"""Averaging ensembles built from aligned member runs.

Member scores are summed in run-id order, so the output does not depend on the
order in which members are listed.  Each output score is clipped to the
members' [min, max] for that key, which keeps identical members bit-identical
after averaging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import apply_isotonic, fit_isotonic
from .data_model import Run, RunSet
from .exceptions import SpecError

AVERAGE_FIELDS = ("calibrated_risk", "raw_score")


@dataclass(frozen=True)
class EnsembleSpec:
    member_run_ids: tuple
    output_run_id: str
    average_field: str = "calibrated_risk"

    def __post_init__(self):
        ids = tuple(self.member_run_ids)
        object.__setattr__(self, "member_run_ids", ids)
        if len(ids) < 2:
            raise SpecError("an ensemble needs at least two members")
        if len(set(ids)) != len(ids):
            raise SpecError(f"duplicate member ids in {ids}")
        if self.average_field not in AVERAGE_FIELDS:
            raise SpecError(f"average_field must be one of {AVERAGE_FIELDS}")


def _mean_in_range(columns):
    stack = np.vstack(columns)
    acc = np.zeros(stack.shape[1])
    for row in stack:
        acc += row
    return np.clip(acc / len(columns), stack.min(axis=0), stack.max(axis=0))


def ensemble_mean(run_set: RunSet, spec: EnsembleSpec) -> Run:
    """Arithmetic mean of the members' scores on ``spec.average_field``.

    When averaging calibrated risks the members' raw scores are averaged too and
    kept as the secondary ranking key.
    """
    missing = [m for m in spec.member_run_ids if m not in run_set.run_ids]
    if missing:
        raise SpecError(f"ensemble members not in RunSet: {missing}")
    members = [run_set[m] for m in sorted(spec.member_run_ids)]
    raw = _mean_in_range([r.raw_score for r in members])
    if spec.average_field == "raw_score":
        cal = None
    else:
        if not all(r.is_calibrated for r in members if len(r)):
            raise SpecError("averaging calibrated_risk requires calibrated members")
        cal = _mean_in_range([r.calibrated_risk for r in members])
    base = members[0]
    return Run(
        spec.output_run_id,
        base.patient_ids,
        base.months,
        raw,
        cal,
        base.labels,
        base.gender,
        base.race,
    )


def partition_members(run_ids, n, m, partition="contiguous"):
    """Split ``n * m`` run ids (sorted) into ``n`` disjoint groups of ``m``.

    ``contiguous`` takes consecutive blocks; ``strided`` puts run ``g + j*n``
    into group ``g``, so the first ``n`` runs land in different groups.
    """
    ids = sorted(run_ids)
    if n < 1 or m < 1:
        raise SpecError("groups and members must be positive")
    if len(ids) != n * m:
        raise SpecError(f"need exactly {n}*{m}={n * m} member runs, got {len(ids)}")
    if partition == "contiguous":
        return [ids[g * m : (g + 1) * m] for g in range(n)]
    if partition == "strided":
        return [ids[g::n] for g in range(n)]
    raise SpecError(f"unknown partition {partition!r}")


def build_ensemble_runset(
    run_set: RunSet,
    n: int,
    m: int,
    partition="contiguous",
    average_field="calibrated_risk",
    prefix="ens",
) -> RunSet:
    """``n`` ensemble runs, each averaging a disjoint group of ``m`` members."""
    groups = partition_members(run_set.run_ids, n, m, partition)
    if m == 1:
        return RunSet([run_set[g[0]] for g in groups])
    width = max(3, len(str(n - 1)))
    runs = [
        ensemble_mean(run_set, EnsembleSpec(tuple(g), f"{prefix}_{i:0{width}d}", average_field))
        for i, g in enumerate(groups)
    ]
    return RunSet(runs)


def recalibrate(test_runs: RunSet, validation_runs: RunSet) -> RunSet:
    """Refit an isotonic map on each validation run and apply it to its test twin.

    Runs are paired by run id.  The fitted map is applied to the ranking field
    of the ensemble (calibrated mean if present, raw mean otherwise).
    """
    out = []
    for run in test_runs:
        try:
            val = validation_runs[run.run_id]
        except KeyError:
            raise SpecError(f"no validation run for {run.run_id}") from None
        fit_on = val.calibrated_risk if val.is_calibrated else val.raw_score
        apply_to = run.calibrated_risk if run.is_calibrated else run.raw_score
        model = fit_isotonic(fit_on, val.labels)
        out.append(run.with_scores(raw_score=apply_to, calibrated_risk=apply_isotonic(model, apply_to)))
    return RunSet(out)
