"""Subgroup representation among top-K selections, and its spread across runs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data_model import ATTRIBUTE_GROUPS, DemographicAttributes, RunSet
from .evaluation import top_k_indices
from .exceptions import DataError


def _groups(attribute):
    try:
        return ATTRIBUTE_GROUPS[attribute]
    except KeyError:
        raise DataError(f"unknown attribute {attribute!r}; use one of {list(ATTRIBUTE_GROUPS)}") from None


def subgroup_composition(
    selection, attributes: Mapping[str, DemographicAttributes], attribute: str
) -> dict[str, float]:
    """Proportion of each group of ``attribute`` within ``selection``."""
    groups = _groups(attribute)
    selection = list(selection)
    if not selection:
        raise DataError("selection is empty")
    counts = dict.fromkeys(groups, 0)
    for pid in selection:
        try:
            counts[getattr(attributes[pid], attribute)] += 1
        except KeyError:
            raise DataError(f"no attributes for patient {pid!r}") from None
    return {g: c / len(selection) for g, c in counts.items()}


@dataclass
class RepresentationRange:
    attribute: str
    group: str
    k: int
    proportions: list  # per run, averaged over months
    range: float
    aggregation: str = "run_mean"

    def to_dict(self):
        return {
            "attribute": self.attribute,
            "group": self.group,
            "k": self.k,
            "aggregation": self.aggregation,
            "proportions": [float(p) for p in self.proportions],
            "min": float(min(self.proportions)),
            "max": float(max(self.proportions)),
            "range": float(self.range),
        }


def monthly_composition(run_set: RunSet, k: int, attribute: str) -> np.ndarray:
    """Array ``[run, month, group]`` of top-K group proportions."""
    groups = _groups(attribute)
    ref = run_set.reference
    column = getattr(ref, attribute)
    months = list(ref.month_groups())
    out = np.zeros((run_set.n, len(months), len(groups)))
    for r, run in enumerate(run_set):
        for t, month in enumerate(months):
            sel = column[top_k_indices(run, month, k)]
            if len(sel):
                for g, name in enumerate(groups):
                    out[r, t, g] = np.count_nonzero(sel == name) / len(sel)
    return out


def representation_range(
    run_set: RunSet, k: int, attribute: str, per_month=False
) -> list[RepresentationRange]:
    """Per group, the max-minus-min of top-K representation across runs.

    By default each run's proportion is first averaged over months and the
    range is taken over those per-run averages.  With ``per_month`` the range is
    taken across runs inside each month and then averaged over months.
    """
    groups = _groups(attribute)
    comp = monthly_composition(run_set, k, attribute)
    per_run = comp.mean(axis=1) if comp.shape[1] else np.zeros((run_set.n, len(groups)))
    out = []
    for g, name in enumerate(groups):
        props = per_run[:, g]
        if per_month and comp.shape[1]:
            spread = float(np.mean(comp[:, :, g].max(axis=0) - comp[:, :, g].min(axis=0)))
        else:
            spread = float(props.max() - props.min())
        out.append(
            RepresentationRange(
                attribute, name, int(k), props.tolist(), spread, "per_month" if per_month else "run_mean"
            )
        )
    return out


def fairness_report(run_set: RunSet, k_grid, attributes=("gender", "race"), per_month=False) -> list[dict]:
    rows = []
    for attribute in attributes:
        for k in k_grid:
            rows.extend(rr.to_dict() for rr in representation_range(run_set, k, attribute, per_month))
    return rows
