"""Prediction runs: domain types, CSV ingestion and persistence.

A :class:`Run` is stored column-wise (numpy arrays) in canonical order, sorted
by ``(month, patient_id)``.  A :class:`RunSet` is a group of runs that share
exactly the same keys, labels and demographic attributes; only the scores
differ between its members.
"""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .exceptions import AlignmentError, ConsistencyError, DataError, ParseError

GENDERS = ("female", "male")
RACES = ("white", "asian", "black", "hispanic", "native_american", "other")
ATTRIBUTE_GROUPS = {"gender": GENDERS, "race": RACES}

EPOCH_YEAR = 2009
CSV_COLUMNS = (
    "run_id",
    "patient_id",
    "month",
    "raw_score",
    "calibrated_risk",
    "label",
    "gender",
    "race",
)

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")
_RUN_ID_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


def month_to_index(text: str) -> int:
    """Convert ``YYYY-MM`` to a month count since January 2009."""
    m = _MONTH_RE.match(text)
    if m is None:
        raise ValueError(f"month must be YYYY-MM, got {text!r}")
    year, month = int(m.group(1)), int(m.group(2))
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range in {text!r}")
    index = (year - EPOCH_YEAR) * 12 + (month - 1)
    if index < 0:
        raise ValueError(f"month {text!r} precedes {EPOCH_YEAR}-01")
    return index


def index_to_month(index: int) -> str:
    if index < 0:
        raise ValueError("month index must be non-negative")
    year, month = divmod(int(index), 12)
    return f"{EPOCH_YEAR + year:04d}-{month + 1:02d}"


@dataclass(frozen=True)
class DemographicAttributes:
    gender: str
    race: str

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise DataError(f"unknown gender {self.gender!r}")
        if self.race not in RACES:
            raise DataError(f"unknown race {self.race!r}")


@dataclass(frozen=True)
class PredictionRecord:
    run_id: str
    patient: str
    month: int
    raw_score: float
    calibrated_risk: float | None
    label: int
    attributes: DemographicAttributes

    def __post_init__(self):
        if not self.patient:
            raise DataError("patient id must be non-empty")
        if self.month < 0:
            raise DataError("month index must be non-negative")
        if not math.isfinite(self.raw_score):
            raise DataError("raw_score must be finite")
        if self.calibrated_risk is not None and not 0.0 <= self.calibrated_risk <= 1.0:
            raise DataError(f"calibrated_risk {self.calibrated_risk} outside [0, 1]")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class Run:
    """One model run's predictions, column-wise and immutable.

    Parameters
    ----------
    run_id : str
    patient_ids, months, raw_score, calibrated_risk, labels, gender, race : array-like
        Equal-length columns.  ``calibrated_risk`` uses NaN for "absent" and must
        be either fully present or fully absent.
    """

    def __init__(
        self,
        run_id,
        patient_ids,
        months,
        raw_score,
        calibrated_risk,
        labels,
        gender,
        race,
    ):
        self.run_id = str(run_id)
        patient_ids = np.asarray(patient_ids, dtype=object)
        months = np.asarray(months, dtype=np.int64)
        n = len(patient_ids)
        if calibrated_risk is None:
            calibrated_risk = np.full(n, np.nan)
        cols = [months, raw_score, calibrated_risk, labels, gender, race]
        if any(len(c) != n for c in cols):
            raise DataError(f"run {self.run_id}: columns have unequal lengths")

        order = np.lexsort((patient_ids.astype(str), months)) if n else np.arange(0)
        self.patient_ids = _frozen(patient_ids[order], object)
        self.months = _frozen(months[order], np.int64)
        self.raw_score = _frozen(np.asarray(raw_score, dtype=np.float64)[order], np.float64)
        self.calibrated_risk = _frozen(
            np.asarray(calibrated_risk, dtype=np.float64)[order], np.float64
        )
        self.labels = _frozen(np.asarray(labels)[order], np.int8)
        self.gender = _frozen(np.asarray(gender, dtype=object)[order], object)
        self.race = _frozen(np.asarray(race, dtype=object)[order], object)
        self._validate()

    def _validate(self):
        rid = self.run_id
        if len(self):
            same = (self.months[1:] == self.months[:-1]) & (
                self.patient_ids[1:] == self.patient_ids[:-1]
            )
            if same.any():
                i = int(np.argmax(same))
                raise DataError(
                    f"run {rid}: duplicate key ({self.patient_ids[i]}, "
                    f"{index_to_month(self.months[i])})"
                )
            if (self.months < 0).any():
                raise DataError(f"run {rid}: negative month index")
            if not np.isfinite(self.raw_score).all():
                raise DataError(f"run {rid}: non-finite raw_score")
            cal = self.calibrated_risk
            present = ~np.isnan(cal)
            if present.any() and not present.all():
                raise DataError(f"run {rid}: calibrated_risk must be all present or all absent")
            if present.any() and ((cal < 0) | (cal > 1)).any():
                raise DataError(f"run {rid}: calibrated_risk outside [0, 1]")
            if not np.isin(self.labels, (0, 1)).all():
                raise DataError(f"run {rid}: labels must be 0/1")
            if not np.isin(self.gender, GENDERS).all() or not np.isin(self.race, RACES).all():
                raise DataError(f"run {rid}: unknown demographic category")
            if any(not p for p in self.patient_ids):
                raise DataError(f"run {rid}: empty patient id")

    def __len__(self):
        return len(self.patient_ids)

    def __repr__(self):
        return f"Run({self.run_id!r}, n={len(self)}, calibrated={self.is_calibrated})"

    @property
    def is_calibrated(self) -> bool:
        return len(self) > 0 and not np.isnan(self.calibrated_risk[0])

    @property
    def keys(self) -> list[tuple[str, int]]:
        return list(zip(self.patient_ids.tolist(), self.months.tolist()))

    def month_groups(self) -> dict[int, slice]:
        """Contiguous slice of each month (records are sorted by month)."""
        if not len(self):
            return {}
        months, starts = np.unique(self.months, return_index=True)
        ends = list(starts[1:]) + [len(self)]
        return {int(m): slice(int(s), int(e)) for m, s, e in zip(months, starts, ends)}

    def with_scores(self, run_id=None, raw_score=None, calibrated_risk=None) -> "Run":
        """Copy of this run with new scores on the same keys."""
        return Run(
            self.run_id if run_id is None else run_id,
            self.patient_ids,
            self.months,
            self.raw_score if raw_score is None else raw_score,
            self.calibrated_risk if calibrated_risk is None else calibrated_risk,
            self.labels,
            self.gender,
            self.race,
        )

    def records(self) -> Iterator[PredictionRecord]:
        for i in range(len(self)):
            cal = float(self.calibrated_risk[i])
            yield PredictionRecord(
                self.run_id,
                self.patient_ids[i],
                int(self.months[i]),
                float(self.raw_score[i]),
                None if math.isnan(cal) else cal,
                int(self.labels[i]),
                DemographicAttributes(self.gender[i], self.race[i]),
            )

    @classmethod
    def from_records(cls, run_id, records: Iterable[PredictionRecord]) -> "Run":
        records = list(records)
        return cls(
            run_id,
            [r.patient for r in records],
            [r.month for r in records],
            [r.raw_score for r in records],
            [np.nan if r.calibrated_risk is None else r.calibrated_risk for r in records],
            [r.label for r in records],
            [r.attributes.gender for r in records],
            [r.attributes.race for r in records],
        )

    def attributes_by_patient(self) -> dict[str, DemographicAttributes]:
        out = {}
        for p, g, r in zip(self.patient_ids, self.gender, self.race):
            out[p] = DemographicAttributes(g, r)
        return out


def _key_diff(a: Run, b: Run, limit=10):
    ka, kb = set(a.keys), set(b.keys)
    diff = sorted((ka - kb) | (kb - ka), key=lambda k: (k[1], k[0]))
    return [(p, index_to_month(m)) for p, m in diff[:limit]]


class RunSet:
    """Aligned runs: identical keys, labels and attributes; only scores differ.

    A RunSet normally holds ``N >= 2`` runs.  Single-run sets are accepted so that
    derived sets (e.g. a one-group ensemble) can flow through the same code;
    operations that compare runs call :meth:`require` first.
    """

    def __init__(self, runs: Sequence[Run]):
        runs = tuple(runs)
        if not runs:
            raise DataError("a RunSet needs at least one run")
        ids = [r.run_id for r in runs]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate run ids in RunSet: {ids}")
        ref = runs[0]
        for run in runs[1:]:
            if len(run) != len(ref) or not (
                np.array_equal(run.months, ref.months)
                and np.array_equal(run.patient_ids, ref.patient_ids)
            ):
                raise AlignmentError(
                    f"runs {ref.run_id} and {run.run_id} have different key sets; "
                    f"first offending keys: {_key_diff(ref, run)}"
                )
            for field in ("labels", "gender", "race"):
                bad = np.flatnonzero(getattr(run, field) != getattr(ref, field))
                if len(bad):
                    i = bad[0]
                    raise ConsistencyError(
                        f"runs {ref.run_id} and {run.run_id} disagree on {field} for "
                        f"({ref.patient_ids[i]}, {index_to_month(ref.months[i])})"
                    )
        self.runs = runs

    @property
    def n(self) -> int:
        return len(self.runs)

    @property
    def run_ids(self) -> list[str]:
        return [r.run_id for r in self.runs]

    @property
    def reference(self) -> Run:
        return self.runs[0]

    def require(self, minimum=2):
        if self.n < minimum:
            raise DataError(f"operation needs at least {minimum} runs, RunSet has {self.n}")
        return self

    def __len__(self):
        return self.n

    def __iter__(self):
        return iter(self.runs)

    def __getitem__(self, run_id) -> Run:
        for r in self.runs:
            if r.run_id == run_id:
                return r
        raise KeyError(run_id)

    def __repr__(self):
        return f"RunSet(n={self.n}, records={len(self.reference)})"


def _parse_rows(path: Path):
    """Yield (line_no, row dict) after validating the header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", path, 1) from None
        if tuple(header) != CSV_COLUMNS:
            raise ParseError(f"header must be {','.join(CSV_COLUMNS)}", path, 1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", path, line)
            yield line, row


def _read_file(path) -> list[Run]:
    path = Path(path)
    columns: dict[str, dict[str, list]] = {}
    seen: dict[str, set] = {}
    try:
        rows = list(_parse_rows(path))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for line, row in rows:
        run_id, pid, month, raw, cal, label, gender, race = row
        try:
            rec = PredictionRecord(
                run_id,
                pid,
                month_to_index(month),
                float(raw),
                float(cal) if cal != "" else None,
                int(label) if label in ("0", "1") else -1,
                DemographicAttributes(gender, race),
            )
        except (ValueError, DataError) as exc:
            raise ParseError(str(exc), path, line) from None
        keys = seen.setdefault(run_id, set())
        if (pid, rec.month) in keys:
            raise ParseError(f"duplicate key ({pid}, {month}) in run {run_id}", path, line)
        keys.add((pid, rec.month))
        cols = columns.setdefault(run_id, {c: [] for c in CSV_COLUMNS[1:]})
        cols["patient_id"].append(pid)
        cols["month"].append(rec.month)
        cols["raw_score"].append(rec.raw_score)
        cols["calibrated_risk"].append(np.nan if rec.calibrated_risk is None else rec.calibrated_risk)
        cols["label"].append(rec.label)
        cols["gender"].append(gender)
        cols["race"].append(race)
    if not columns:
        return [Run(path.stem, [], [], [], [], [], [], [])]
    runs = []
    for run_id, c in columns.items():
        try:
            runs.append(
                Run(
                    run_id,
                    c["patient_id"],
                    c["month"],
                    c["raw_score"],
                    c["calibrated_risk"],
                    c["label"],
                    c["gender"],
                    c["race"],
                )
            )
        except DataError as exc:
            raise ParseError(str(exc), path) from None
    return runs


def load_runs(paths: Sequence[str | os.PathLike], min_runs=2) -> RunSet:
    """Load prediction CSV files into an aligned :class:`RunSet`.

    A file may hold one or several runs (grouped by ``run_id``).  A header-only
    file is an empty run named after the file stem.
    """
    runs = []
    for p in paths:
        runs.extend(_read_file(p))
    return RunSet(runs).require(min_runs)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_run(run: Run, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for i in range(len(run)):
                cal = run.calibrated_risk[i]
                w.writerow(
                    (
                        run.run_id,
                        run.patient_ids[i],
                        index_to_month(run.months[i]),
                        _fmt(run.raw_score[i]),
                        "" if math.isnan(cal) else _fmt(cal),
                        int(run.labels[i]),
                        run.gender[i],
                        run.race[i],
                    )
                )
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return path


def write_runs(run_set: RunSet, directory) -> list[Path]:
    """Write one ``<run_id>.csv`` per run into ``directory``; return the paths."""
    directory = Path(directory)
    paths = []
    for run in run_set:
        if not _RUN_ID_RE.match(run.run_id):
            raise DataError(f"run id {run.run_id!r} is not usable as a file name")
        paths.append(write_run(run, directory / f"{run.run_id}.csv"))
    return paths
