"""Herd records: CSV ingestion, episode enrollment, control matching and
leakage-safe grouped splits.

All dates are ``datetime.date``; "consecutive" always means calendar
consecutive. Rejections and unmatched cases are returned as data, never
raised.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from typing import IO, Iterable, Iterator, Mapping, Sequence

import numpy as np

from ._seeding import check_seed

CHANNELS = ("non_active", "active", "highly_active", "eating", "ruminating", "ear_temp")
PROPORTION_CHANNELS = CHANNELS[:5]

BEHAVIOR_HEADER = ("cow_id", "date") + CHANNELS
LESION_HEADER = ("cow_id", "date", "status", "size")
PROFILE_HEADER = ("cow_id", "parity", "repro_status", "calving_date")

LESION_STATUSES = ("none", "active", "digressing")
LESION_SIZES = ("none", "small", "medium", "large")
REPRO_STATUSES = ("open", "pregnant")
LACTATION_PERIODS = ("early", "mid", "late")

CLEAN_DAYS = 7
EAR_TEMP_BOUNDS = (-10.0, 45.0)

# rejection reason codes
INCOMPLETE_SENSOR_HISTORY = "incomplete_sensor_history"
LESION_NOT_PERSISTENT = "lesion_not_persistent"
LESION_IN_LOOKBACK = "lesion_in_lookback"
MISSING_PROFILE = "missing_profile"
CALVED_AFTER_DAY0 = "calved_after_day0"


class HerdDataError(ValueError):
    """Validation failure while reading herd files.

    ``reason`` is a machine-readable code, ``line`` the 1-based CSV line
    number (header is line 1) when the error is tied to a row.
    """

    def __init__(self, reason: str, message: str, line: int | None = None, source: str | None = None):
        self.reason = reason
        self.line = line
        self.source = source
        where = f", line {line}" if line is not None else ""
        super().__init__(f"{message}{where}")

    def as_dict(self) -> dict:
        return {"reason": self.reason, "message": str(self), "line": self.line, "source": self.source}


@dataclass(frozen=True)
class BehaviorDay:
    cow_id: str
    date: date
    non_active: float
    active: float
    highly_active: float
    eating: float
    ruminating: float
    ear_temp: float

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in CHANNELS)


@dataclass(frozen=True)
class CowProfile:
    cow_id: str
    parity: int
    repro_status: str
    calving_date: date

    def dim_at(self, day: date) -> int:
        return (day - self.calving_date).days


@dataclass(frozen=True)
class LesionObservation:
    cow_id: str
    date: date
    status: str
    size: str

    @property
    def present(self) -> bool:
        return self.status != "none"


@dataclass(frozen=True)
class Episode:
    """A case anchored at ``day0`` plus, once matched, its control cow."""

    case_cow_id: str
    day0: date
    control_cow_id: str | None = None
    lactation_period: str | None = None
    dim: int | None = None
    enrollment_checks: Mapping[str, bool] = field(default_factory=dict)


# --------------------------------------------------------------------------
# parsing


def _read_rows(stream: IO[str] | str, header: Sequence[str], source: str) -> Iterator[tuple[int, list[str]]]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    try:
        first = next(reader)
    except StopIteration:
        raise HerdDataError("empty_file", f"{source}: empty file", source=source) from None
    if tuple(h.strip() for h in first) != tuple(header):
        raise HerdDataError(
            "unknown_header",
            f"{source}: unknown header {','.join(first)!r}, expected {','.join(header)!r}",
            line=1,
            source=source,
        )
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise HerdDataError("malformed_row", f"{source}: expected {len(header)} fields, got {len(row)}", line, source)
        yield line, [c.strip() for c in row]


def _parse_date(text: str, line: int, source: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise HerdDataError("malformed_row", f"{source}: bad date {text!r}", line, source) from None


def _parse_float(text: str, name: str, line: int, source: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise HerdDataError("malformed_row", f"{source}: bad number {text!r} for {name}", line, source) from None
    if not math.isfinite(value):
        raise HerdDataError("malformed_row", f"{source}: non-finite value for {name}", line, source)
    return value


def _check_id(text: str, line: int, source: str) -> str:
    if not text:
        raise HerdDataError("malformed_row", f"{source}: empty cow_id", line, source)
    return text


def parse_behavior(stream: IO[str] | str, ear_temp_bounds: tuple[float, float] = EAR_TEMP_BOUNDS) -> list[BehaviorDay]:
    """Parse and validate a behavior CSV; rows come back sorted by (cow_id, date)."""
    source = "behavior"
    seen: dict[tuple[str, date], int] = {}
    out = []
    for line, row in _read_rows(stream, BEHAVIOR_HEADER, source):
        cow = _check_id(row[0], line, source)
        day = _parse_date(row[1], line, source)
        vals = [_parse_float(t, c, line, source) for t, c in zip(row[2:], CHANNELS)]
        for c, v in zip(PROPORTION_CHANNELS, vals):
            if not 0.0 <= v <= 1.0:
                raise HerdDataError("proportion_out_of_range", f"{source}: proportion out of range ({c}={v})", line, source)
        lo, hi = ear_temp_bounds
        if not lo <= vals[5] <= hi:
            raise HerdDataError("ear_temp_out_of_range", f"{source}: ear_temp {vals[5]} outside [{lo}, {hi}]", line, source)
        key = (cow, day)
        if key in seen:
            raise HerdDataError("duplicate_cow_day", f"{source}: duplicate cow-day {cow} {day} (first at line {seen[key]})", line, source)
        seen[key] = line
        out.append(BehaviorDay(cow, day, *vals))
    out.sort(key=lambda b: (b.cow_id, b.date))
    return out


def parse_lesions(stream: IO[str] | str) -> list[LesionObservation]:
    source = "lesions"
    seen: set[tuple[str, date]] = set()
    out = []
    for line, row in _read_rows(stream, LESION_HEADER, source):
        cow = _check_id(row[0], line, source)
        day = _parse_date(row[1], line, source)
        status, size = row[2], row[3]
        if status not in LESION_STATUSES:
            raise HerdDataError("bad_status", f"{source}: unknown status {status!r}", line, source)
        if size not in LESION_SIZES:
            raise HerdDataError("bad_size", f"{source}: unknown size {size!r}", line, source)
        if (status == "none") != (size == "none"):
            raise HerdDataError("status_size_mismatch", f"{source}: status {status!r} with size {size!r}", line, source)
        if (cow, day) in seen:
            raise HerdDataError("duplicate_cow_day", f"{source}: duplicate cow-day {cow} {day}", line, source)
        seen.add((cow, day))
        out.append(LesionObservation(cow, day, status, size))
    out.sort(key=lambda o: (o.cow_id, o.date))
    return out


def parse_profiles(stream: IO[str] | str) -> list[CowProfile]:
    source = "profiles"
    seen: set[str] = set()
    out = []
    for line, row in _read_rows(stream, PROFILE_HEADER, source):
        cow = _check_id(row[0], line, source)
        try:
            parity = int(row[1])
        except ValueError:
            raise HerdDataError("malformed_row", f"{source}: bad parity {row[1]!r}", line, source) from None
        if parity < 1:
            raise HerdDataError("bad_parity", f"{source}: parity must be >= 1, got {parity}", line, source)
        if row[2] not in REPRO_STATUSES:
            raise HerdDataError("bad_repro_status", f"{source}: unknown repro_status {row[2]!r}", line, source)
        calving = _parse_date(row[3], line, source)
        if cow in seen:
            raise HerdDataError("duplicate_cow", f"{source}: duplicate cow {cow}", line, source)
        seen.add(cow)
        out.append(CowProfile(cow, parity, row[2], calving))
    out.sort(key=lambda p: p.cow_id)
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def write_behavior(records: Iterable[BehaviorDay], stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(BEHAVIOR_HEADER)
    for b in records:
        w.writerow([b.cow_id, b.date.isoformat(), *(_fmt(v) for v in b.values())])


def write_lesions(records: Iterable[LesionObservation], stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(LESION_HEADER)
    for o in records:
        w.writerow([o.cow_id, o.date.isoformat(), o.status, o.size])


def write_profiles(records: Iterable[CowProfile], stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(PROFILE_HEADER)
    for p in records:
        w.writerow([p.cow_id, p.parity, p.repro_status, p.calving_date.isoformat()])


# --------------------------------------------------------------------------
# enrollment and matching


def lactation_period(dim: int) -> str:
    """Lactation stage from days in milk; 100 DIM counts as early."""
    if dim < 0:
        raise ValueError(f"days in milk must be >= 0, got {dim}")
    if dim <= 100:
        return "early"
    if dim <= 199:
        return "mid"
    return "late"


def behavior_days_by_cow(behavior: Iterable[BehaviorDay]) -> dict[str, set[date]]:
    days: dict[str, set[date]] = defaultdict(set)
    for b in behavior:
        days[b.cow_id].add(b.date)
    return days


def _lesions_by_cow(lesions: Iterable[LesionObservation]) -> dict[str, dict[date, LesionObservation]]:
    by_cow: dict[str, dict[date, LesionObservation]] = defaultdict(dict)
    for o in lesions:
        by_cow[o.cow_id][o.date] = o
    return by_cow


def check_enrollment(
    cow_id: str,
    day0: date,
    lesions_by_day: Mapping[date, LesionObservation],
    sensor_days: set[date],
    clean_days: int = CLEAN_DAYS,
) -> dict[str, bool]:
    """Evaluate the three enrollment rules for a candidate anchored at ``day0``."""
    lookback = [day0 - timedelta(days=d) for d in range(1, clean_days + 1)]
    first_active = min((d for d, o in lesions_by_day.items() if o.status == "active"), default=None)
    nxt = lesions_by_day.get(day0 + timedelta(days=1))
    return {
        "day0_is_first_active": first_active == day0,
        "complete_sensor_history": all(d in sensor_days for d in lookback),
        "clean_lookback": not any(lesions_by_day[d].present for d in lookback if d in lesions_by_day),
        "lesion_persistent": day0 in lesions_by_day and lesions_by_day[day0].present and nxt is not None and nxt.present,
    }


def derive_episodes(
    lesions: Sequence[LesionObservation],
    behavior: Sequence[BehaviorDay],
    profiles: Sequence[CowProfile] | None = None,
    clean_days: int = CLEAN_DAYS,
) -> tuple[list[Episode], list[tuple[str, str]]]:
    """Anchor one candidate episode per cow at its earliest active lesion.

    Returns ``(enrolled, rejected)``; ``rejected`` holds ``(cow_id, reason)``
    pairs. When ``profiles`` is given, enrolled episodes carry the DIM and
    lactation period at day 0.
    """
    by_cow = _lesions_by_cow(lesions)
    sensor = behavior_days_by_cow(behavior)
    prof = {p.cow_id: p for p in profiles} if profiles is not None else None
    enrolled, rejected = [], []
    for cow in sorted(by_cow):
        actives = [d for d, o in by_cow[cow].items() if o.status == "active"]
        if not actives:
            continue
        day0 = min(actives)
        checks = check_enrollment(cow, day0, by_cow[cow], sensor.get(cow, set()), clean_days)
        if not checks["complete_sensor_history"]:
            rejected.append((cow, INCOMPLETE_SENSOR_HISTORY))
            continue
        if not checks["clean_lookback"]:
            rejected.append((cow, LESION_IN_LOOKBACK))
            continue
        if not checks["lesion_persistent"]:
            rejected.append((cow, LESION_NOT_PERSISTENT))
            continue
        dim = period = None
        if prof is not None:
            if cow not in prof:
                rejected.append((cow, MISSING_PROFILE))
                continue
            dim = prof[cow].dim_at(day0)
            if dim < 0:
                rejected.append((cow, CALVED_AFTER_DAY0))
                continue
            period = lactation_period(dim)
        enrolled.append(Episode(cow, day0, None, period, dim, checks))
    return enrolled, rejected


def match_controls(
    cases: Sequence[Episode],
    candidates: Sequence[CowProfile],
    behavior: Sequence[BehaviorDay],
    lesions: Sequence[LesionObservation] = (),
    horizon: int = CLEAN_DAYS,
) -> list[Episode]:
    """Pair each case with one healthy control sharing parity, reproduction
    status and lactation period.

    Greedy one-to-one assignment in ascending (day0, case id) order; among
    key-identical candidates the nearest DIM wins, then the smallest cow id.
    Eligible controls have no lesion observed at any time and sensor records
    for every day of the case's ``horizon`` days before day 0. Unmatched cases
    come back with ``control_cow_id=None`` and ``enrollment_checks["matched"]``
    set to False.
    """
    sensor = behavior_days_by_cow(behavior)
    sick = {o.cow_id for o in lesions if o.present}
    case_ids = {e.case_cow_id for e in cases}
    pool = [p for p in candidates if p.cow_id not in sick and p.cow_id not in case_ids]
    profile_by_id = {p.cow_id: p for p in candidates}
    used: set[str] = set()
    result: dict[int, Episode] = {}
    order = sorted(range(len(cases)), key=lambda i: (cases[i].day0, cases[i].case_cow_id))
    for i in order:
        case = cases[i]
        prof = profile_by_id.get(case.case_cow_id)
        dim = case.dim if case.dim is not None else (prof.dim_at(case.day0) if prof else None)
        best = None
        if prof is not None and dim is not None and dim >= 0:
            period = lactation_period(dim)
            window = [case.day0 - timedelta(days=d) for d in range(1, horizon + 1)]
            for cand in pool:
                if cand.cow_id in used:
                    continue
                cdim = cand.dim_at(case.day0)
                if cdim < 0 or cand.parity != prof.parity or cand.repro_status != prof.repro_status:
                    continue
                if lactation_period(cdim) != period:
                    continue
                days = sensor.get(cand.cow_id, set())
                if not all(d in days for d in window):
                    continue
                key = (abs(cdim - dim), cand.cow_id)
                if best is None or key < best[0]:
                    best = (key, cand.cow_id)
        checks = dict(case.enrollment_checks)
        checks["matched"] = best is not None
        if best is not None:
            used.add(best[1])
        result[i] = replace(
            case,
            control_cow_id=best[1] if best else None,
            dim=dim,
            lactation_period=lactation_period(dim) if dim is not None and dim >= 0 else case.lactation_period,
            enrollment_checks=checks,
        )
    return [result[i] for i in range(len(cases))]


# --------------------------------------------------------------------------
# feature matrix and grouped splits


@dataclass(frozen=True)
class FeatureMatrix:
    """Named numeric rows with binary labels and the cow each row came from."""

    feature_names: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.size == 0:
            X = X.reshape(len(self.y), len(self.feature_names))
        y = np.asarray(self.y, dtype=int)
        groups = np.asarray(self.groups, dtype=object)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "groups", groups)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValueError(f"X shape {X.shape} does not match {len(self.feature_names)} feature names")
        if len(y) != X.shape[0] or len(groups) != X.shape[0]:
            raise ValueError("labels and group ids must have one entry per row")
        if not np.all(np.isfinite(X)):
            raise ValueError("feature matrix contains non-finite values")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be binary")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=int)
        return FeatureMatrix(self.feature_names, self.X[rows], self.y[rows], self.groups[rows])

    def select(self, columns: Sequence[int]) -> "FeatureMatrix":
        columns = list(columns)
        return FeatureMatrix(tuple(self.feature_names[j] for j in columns), self.X[:, columns], self.y, self.groups)

    @staticmethod
    def concat(parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        names = parts[0].feature_names
        if any(p.feature_names != names for p in parts):
            raise ValueError("cannot concatenate matrices with different features")
        return FeatureMatrix(
            names,
            np.vstack([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.groups for p in parts]),
        )

    def unique_groups(self) -> list:
        return sorted(set(self.groups.tolist()))

    def to_csv(self, stream: IO[str], label_column: str = "label", group_column: str = "cow_id") -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow([group_column, *self.feature_names, label_column])
        for g, row, lab in zip(self.groups, self.X, self.y):
            w.writerow([g, *(_fmt(v) for v in row), int(lab)])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def grouped_split(
    matrix: FeatureMatrix,
    test_fraction: float,
    seed: int,
    stratify: bool = False,
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Split rows into train/test so that no cow appears on both sides.

    ``round(test_fraction * n_groups)`` groups (at least one, at most
    ``n_groups - 1``) are drawn by a seeded uniform shuffle. With
    ``stratify=True`` groups owning any positive row and the remaining groups
    are shuffled and split separately, so both sides see both kinds of cow.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    groups = matrix.unique_groups()
    if len(groups) < 2:
        raise ValueError("insufficient groups: need at least 2 distinct group ids")
    rng = np.random.default_rng(check_seed(seed))
    if stratify:
        pos = set(matrix.groups[matrix.y == 1].tolist())
        strata = [[g for g in groups if g in pos], [g for g in groups if g not in pos]]
    else:
        strata = [groups]
    test_groups: set = set()
    for stratum in strata:
        if not stratum:
            continue
        n_test = _round_half_up(test_fraction * len(stratum))
        if len(stratum) >= 2:
            n_test = min(max(n_test, 1), len(stratum) - 1)
        perm = rng.permutation(len(stratum))
        test_groups.update(stratum[i] for i in perm[:n_test])
    if not test_groups or len(test_groups) == len(groups):
        raise ValueError("insufficient groups: split would leave one side empty")
    in_test = np.array([g in test_groups for g in matrix.groups], dtype=bool)
    return matrix.take(np.flatnonzero(~in_test)), matrix.take(np.flatnonzero(in_test))


class GroupedKFold:
    """Seeded k-fold splitter over groups with the scikit-learn ``split`` API.

    Shuffled groups are cut into ``n_splits`` contiguous folds; the first
    ``n_groups % n_splits`` folds get one extra group.
    """

    def __init__(self, n_splits: int = 5, seed: int = 0):
        self.n_splits = n_splits
        self.seed = seed

    def get_n_splits(self, X=None, y=None, groups=None) -> int:
        return self.n_splits

    def fold_groups(self, groups) -> list[list]:
        k = int(self.n_splits)
        if k < 2:
            raise ValueError(f"k must be >= 2, got {k}")
        uniq = sorted(set(np.asarray(groups, dtype=object).tolist()))
        if k > len(uniq):
            raise ValueError(f"k={k} exceeds the number of groups ({len(uniq)})")
        perm = np.random.default_rng(check_seed(self.seed)).permutation(len(uniq))
        shuffled = [uniq[i] for i in perm]
        base, extra = divmod(len(uniq), k)
        folds, start = [], 0
        for f in range(k):
            size = base + (1 if f < extra else 0)
            folds.append(shuffled[start:start + size])
            start += size
        return folds

    def split(self, X=None, y=None, groups=None):
        groups = np.asarray(groups, dtype=object)
        for fold in self.fold_groups(groups):
            members = set(fold)
            mask = np.fromiter((g in members for g in groups), dtype=bool, count=len(groups))
            yield np.flatnonzero(~mask), np.flatnonzero(mask)


def grouped_kfold(matrix: FeatureMatrix, k: int, seed: int) -> list[tuple[FeatureMatrix, FeatureMatrix]]:
    splitter = GroupedKFold(k, seed)
    return [(matrix.take(tr), matrix.take(va)) for tr, va in splitter.split(groups=matrix.groups)]


def rejection_report(rejected: Iterable[tuple[str, str]]) -> list[dict]:
    return [{"cow_id": cow, "reason": reason} for cow, reason in rejected]
