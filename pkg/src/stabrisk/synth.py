"""Seeded synthetic cohort with the shape of a monthly EHR prediction dataset.

Each patient gets demographics, a personal pool of frequently recurring codes
and, for every month of the study window, a sparse multi-hot vector over
``feature_dim x n_time_buckets`` code slots plus age and gender slots.  Labels
come from a latent linear score with a logistic link; the intercept is solved
so that the mean event probability equals ``target_prevalence``.

Randomness: every patient draws from its own Philox stream keyed by
``(seed, "patient", patient_index)``; cohort-level draws (code popularity,
group codes, latent weights, split assignment) use streams keyed by stage
name.  Output is therefore independent of generation order.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logit

from . import _rng
from .data_model import GENDERS, RACES, index_to_month, month_to_index
from .exceptions import ConfigError, DataError

DEFAULT_RACE_MIX = {
    "white": 0.44,
    "asian": 0.1813,
    "black": 0.0385,
    "hispanic": 0.0202,
    "native_american": 0.0112,
    "other": 1.0 - (0.44 + 0.1813 + 0.0385 + 0.0202 + 0.0112),
}
SPLITS = ("train", "validation", "test")


@dataclass
class CohortConfig:
    n_patients: int = 20000
    start_month: int = 120  # 2019-01
    n_months: int = 24
    feature_dim: int = 200
    n_time_buckets: int = 4
    n_age_buckets: int = 8
    target_prevalence: float = 0.0017
    female_fraction: float = 0.5366
    race_mix: dict = field(default_factory=lambda: dict(DEFAULT_RACE_MIX))
    split_fractions: tuple = (0.8, 0.1, 0.1)
    mean_active: float = 20.0
    pool_mean: float = 12.0
    pool_fraction: float = 0.7
    signal_strength: float = 2.0
    group_codes: int = 6
    group_code_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        self.race_mix = {k: float(v) for k, v in self.race_mix.items()}
        self.validate()

    def validate(self):
        if self.n_patients < 1:
            raise ConfigError("n_patients must be positive")
        if self.n_months < 1 or self.start_month < 0:
            raise ConfigError("month range must be non-empty and start at a non-negative index")
        if self.feature_dim < 1 or self.n_time_buckets < 1 or self.n_age_buckets < 1:
            raise ConfigError("feature_dim, n_time_buckets and n_age_buckets must be positive")
        if not 0.0 < self.target_prevalence < 1.0:
            raise ConfigError("target_prevalence must lie in (0, 1)")
        if not 0.0 <= self.female_fraction <= 1.0:
            raise ConfigError("female_fraction must lie in [0, 1]")
        if set(self.race_mix) - set(RACES):
            raise ConfigError(f"unknown race categories {set(self.race_mix) - set(RACES)}")
        if any(v < 0 for v in self.race_mix.values()) or not math.isclose(
            sum(self.race_mix.values()), 1.0, abs_tol=1e-9
        ):
            raise ConfigError("race_mix must be non-negative and sum to 1")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions):
            raise ConfigError("split_fractions needs three non-negative values")
        if not math.isclose(sum(self.split_fractions), 1.0, abs_tol=1e-9):
            raise ConfigError("split_fractions must sum to 1")
        if self.mean_active <= 0 or self.pool_mean < 0 or not 0 <= self.pool_fraction <= 1:
            raise ConfigError("invalid sparsity parameters")
        if self.group_codes < 0 or not 0 <= self.group_code_rate <= 1:
            raise ConfigError("invalid group-code parameters")

    @property
    def n_code_slots(self):
        return self.feature_dim * self.n_time_buckets

    @property
    def n_slots(self):
        return self.n_code_slots + self.n_age_buckets + len(GENDERS)

    @property
    def months(self):
        return range(self.start_month, self.start_month + self.n_months)

    @classmethod
    def from_dict(cls, values: dict) -> "CohortConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown cohort config keys: {sorted(unknown)}")
        values = dict(values)
        if isinstance(values.get("start_month"), str):
            values["start_month"] = month_to_index(values["start_month"])
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d


def read_key_values(path, section="config") -> dict:
    """Read a ``key = value`` file (optionally sectioned) into a dict.

    Values are parsed as JSON where possible (numbers, lists, objects, quoted
    strings) and kept as bare strings otherwise.
    """
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        if not text.lstrip().startswith("["):
            text = f"[{section}]\n" + text
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    sections = parser.sections()
    name = section if section in sections else (sections[0] if sections else None)
    if name is None:
        return {}
    out = {}
    for key, raw in parser.items(name):
        raw = raw.strip()
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw.strip("'\"")
    return out


def load_cohort_config(path) -> CohortConfig:
    return CohortConfig.from_dict(read_key_values(path, "cohort"))


def solve_intercept(latent_scores, target_prevalence, tol=1e-12, max_iter=500) -> float:
    """Intercept ``b`` with ``mean(sigmoid(s + b)) == target_prevalence``.

    Bisection over a bracket that is guaranteed to contain the root: shifting
    every score to at most / at least ``logit(target)``.
    """
    s = np.asarray(latent_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("latent_scores must be non-empty")
    if not 0.0 < target_prevalence < 1.0:
        raise ValueError("target_prevalence must lie in (0, 1)")
    t = logit(target_prevalence)
    lo, hi = t - s.max(), t - s.min()
    if lo == hi:
        return float(lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi) or hi - lo < tol:
            break
        if expit(s + mid).mean() < target_prevalence:
            lo = mid
        else:
            hi = mid
    return float(0.5 * (lo + hi))


@dataclass
class Cohort:
    """Synthetic population and its monthly examples.

    Examples are ordered by ``(patient index, month)``; ``X`` is a CSR matrix
    with one row per example.
    """

    config: CohortConfig
    patient_ids: np.ndarray
    gender: np.ndarray
    race: np.ndarray
    split: np.ndarray
    example_patient: np.ndarray
    example_month: np.ndarray
    labels: np.ndarray
    X: sp.csr_matrix
    intercept: float = float("nan")

    def __post_init__(self):
        if not set(np.unique(self.split)) <= set(SPLITS):
            raise DataError("unknown split name")
        if self.X.shape[0] != len(self.labels):
            raise DataError("feature rows and labels differ in length")

    @property
    def n_examples(self):
        return len(self.labels)

    def split_mask(self, split) -> np.ndarray:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return self.split[self.example_patient] == split

    def examples(self, split):
        """``(X, y, example indices)`` of a split."""
        idx = np.flatnonzero(self.split_mask(split))
        return self.X[idx], self.labels[idx], idx

    def prevalence(self):
        return float(self.labels.mean()) if self.n_examples else float("nan")


def _patient_draws(cfg: CohortConfig, index, popularity, group_pools, race_names, race_p):
    rng = _rng.generator(cfg.seed, "patient", index)
    female = rng.random() < cfg.female_fraction
    race = race_names[rng.choice(len(race_names), p=race_p)]
    age0 = rng.uniform(18.0, 90.0)

    n_codes = cfg.feature_dim
    pool = rng.choice(n_codes, size=1 + rng.poisson(cfg.pool_mean), p=popularity)
    extra = [pool]
    for group in ("female" if female else "male", race):
        codes = group_pools.get(group)
        if codes is not None and len(codes):
            keep = rng.random(len(codes)) < cfg.group_code_rate
            extra.append(codes[keep])
    pool = np.unique(np.concatenate(extra))

    n_months = cfg.n_months
    counts = rng.poisson(cfg.mean_active, size=n_months)
    total = int(counts.sum())
    from_pool = rng.random(total) < cfg.pool_fraction
    codes = np.where(
        from_pool,
        pool[rng.integers(0, len(pool), size=total)],
        rng.choice(n_codes, size=total, p=popularity),
    )
    buckets = rng.integers(0, cfg.n_time_buckets, size=total)
    label_u = rng.random(n_months)

    month_local = np.repeat(np.arange(n_months), counts)
    slots = codes * cfg.n_time_buckets + buckets
    ages = age0 + np.arange(n_months) / 12.0
    age_slot = cfg.n_code_slots + np.minimum(
        ((ages - 18.0) // (72.0 / cfg.n_age_buckets)).astype(np.int64), cfg.n_age_buckets - 1
    )
    gender_slot = cfg.n_code_slots + cfg.n_age_buckets + (0 if female else 1)

    keys = np.concatenate(
        [
            month_local * cfg.n_slots + slots,
            np.arange(n_months) * cfg.n_slots + age_slot,
            np.arange(n_months) * cfg.n_slots + gender_slot,
        ]
    )
    keys = np.unique(keys)
    rows, cols = np.divmod(keys, cfg.n_slots)
    row_counts = np.bincount(rows, minlength=n_months)
    return ("female" if female else "male"), race, cols, row_counts, label_u


def _latent_weights(cfg: CohortConfig, group_pools) -> np.ndarray:
    rng = _rng.generator(cfg.seed, "weights")
    scale = cfg.signal_strength / math.sqrt(cfg.mean_active)
    w = rng.standard_normal(cfg.n_slots) * scale
    # recent activity carries more signal than old history
    decay = 0.5 ** np.arange(cfg.n_time_buckets)
    w[: cfg.n_code_slots] *= np.tile(decay / decay.mean(), cfg.feature_dim)
    # group codes raise risk so that top-K composition depends on the model
    for codes in group_pools.values():
        for c in codes:
            sl = slice(c * cfg.n_time_buckets, (c + 1) * cfg.n_time_buckets)
            w[sl] = np.abs(w[sl])
    return w


def generate_cohort(config: CohortConfig, keep_latent=False) -> Cohort:
    """Generate the cohort; a pure function of ``config`` (seed included)."""
    cfg = config
    cfg.validate()
    base = _rng.generator(cfg.seed, "cohort")
    ranks = base.permutation(cfg.feature_dim)
    popularity = 1.0 / (ranks + 10.0)
    popularity /= popularity.sum()
    group_pools = {}
    if cfg.group_codes:
        for group in GENDERS + RACES:
            group_pools[group] = base.choice(cfg.feature_dim, size=cfg.group_codes, replace=False)

    race_names = [r for r in RACES if cfg.race_mix.get(r, 0.0) > 0]
    race_p = np.array([cfg.race_mix[r] for r in race_names])
    race_p /= race_p.sum()

    n = cfg.n_patients
    gender = np.empty(n, dtype=object)
    race = np.empty(n, dtype=object)
    all_cols, all_counts, all_u = [], [], []
    for i in range(n):
        g, r, cols, counts, u = _patient_draws(cfg, i, popularity, group_pools, race_names, race_p)
        gender[i], race[i] = g, r
        all_cols.append(cols)
        all_counts.append(counts)
        all_u.append(u)

    counts = np.concatenate(all_counts)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.concatenate(all_cols).astype(np.int32)
    X = sp.csr_matrix(
        (np.ones(len(indices), dtype=np.float64), indices, indptr),
        shape=(n * cfg.n_months, cfg.n_slots),
    )
    example_patient = np.repeat(np.arange(n), cfg.n_months)
    example_month = np.tile(np.arange(cfg.start_month, cfg.start_month + cfg.n_months), n)

    w = _latent_weights(cfg, group_pools)
    latent = X @ w
    b = solve_intercept(latent, cfg.target_prevalence)
    labels = (np.concatenate(all_u) < expit(latent + b)).astype(np.int8)

    split = np.empty(n, dtype=object)
    order = _rng.generator(cfg.seed, "split").permutation(n)
    n_train = int(round(cfg.split_fractions[0] * n))
    n_val = min(int(round(cfg.split_fractions[1] * n)), n - n_train)
    split[order[:n_train]] = "train"
    split[order[n_train : n_train + n_val]] = "validation"
    split[order[n_train + n_val :]] = "test"

    width = max(6, len(str(n)))
    patient_ids = np.array([f"P{i:0{width}d}" for i in range(n)], dtype=object)
    cohort = Cohort(
        cfg, patient_ids, gender, race, split, example_patient, example_month, labels, X, b
    )
    if keep_latent:
        cohort.latent = latent
    return cohort


def save_cohort(cohort: Cohort, directory) -> Path:
    """Write ``patients.csv``, ``examples.csv`` and ``cohort.json`` to ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "patients.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "gender", "race", "split"))
        w.writerows(zip(cohort.patient_ids, cohort.gender, cohort.race, cohort.split))
    X = cohort.X
    ids = cohort.patient_ids
    with open(d / "examples.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("patient_id,month,label,features\n")
        lines = []
        for row in range(cohort.n_examples):
            feats = " ".join(map(str, X.indices[X.indptr[row] : X.indptr[row + 1]].tolist()))
            lines.append(
                f"{ids[cohort.example_patient[row]]},{index_to_month(cohort.example_month[row])},"
                f"{int(cohort.labels[row])},{feats}\n"
            )
        fh.writelines(lines)
    meta = {
        "config": cohort.config.to_dict(),
        "n_slots": cohort.config.n_slots,
        "intercept": cohort.intercept,
    }
    (d / "cohort.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_cohort(directory) -> Cohort:
    d = Path(directory)
    try:
        meta = json.loads((d / "cohort.json").read_text())
        cfg = CohortConfig.from_dict(meta["config"])
        with open(d / "patients.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read cohort at {d}: {exc}") from exc
    if rows[0] != ["id", "gender", "race", "split"]:
        raise DataError(f"{d / 'patients.csv'}: unexpected header")
    body = rows[1:]
    patient_ids = np.array([r[0] for r in body], dtype=object)
    gender = np.array([r[1] for r in body], dtype=object)
    race = np.array([r[2] for r in body], dtype=object)
    split = np.array([r[3] for r in body], dtype=object)
    index = {p: i for i, p in enumerate(patient_ids)}

    ex_patient, ex_month, labels, indptr, indices = [], [], [], [0], []
    with open(d / "examples.csv", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "patient_id,month,label,features":
            raise DataError(f"{d / 'examples.csv'}: unexpected header")
        for line_no, line in enumerate(fh, start=2):
            try:
                pid, month, label, feats = line.rstrip("\n").split(",")
                ex_patient.append(index[pid])
                ex_month.append(month_to_index(month))
                labels.append(int(label))
                cols = [int(c) for c in feats.split()]
            except (ValueError, KeyError) as exc:
                raise DataError(f"{d / 'examples.csv'}:{line_no}: {exc}") from exc
            indices.extend(cols)
            indptr.append(len(indices))
    n_slots = int(meta["n_slots"])
    X = sp.csr_matrix(
        (np.ones(len(indices)), np.array(indices, dtype=np.int32), np.array(indptr)),
        shape=(len(labels), n_slots),
    )
    return Cohort(
        cfg,
        patient_ids,
        gender,
        race,
        split,
        np.array(ex_patient, dtype=np.int64),
        np.array(ex_month, dtype=np.int64),
        np.array(labels, dtype=np.int8),
        X,
        float(meta.get("intercept", float("nan"))),
    )
