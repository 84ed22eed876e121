"""Turn validated cow-days into learner-ready matrices.

Detection rows stack the seven days before day 0; prediction rows aggregate
a ``window``-day block ending ``lag`` days before the reference day. Scaling
and polynomial expansion are scikit-learn style transformers that only ever
see the rows they are fitted on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date, timedelta
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .herd_data import CHANNELS, BehaviorDay, FeatureMatrix
from .learners import kmeans

AGGREGATES = ("mean", "sum", "std")
DETECTION_DAYS = 7


class IncompleteDataError(ValueError):
    def __init__(self, reason: str, message: str):
        self.reason = reason
        super().__init__(message)


class BehaviorTable:
    """Per-cow lookup of the six channel values by date."""

    def __init__(self, behavior: Iterable[BehaviorDay]):
        self._by_cow: dict[str, dict[date, np.ndarray]] = {}
        for b in behavior:
            self._by_cow.setdefault(b.cow_id, {})[b.date] = np.array(b.values(), dtype=float)

    def series(self, cow_id: str) -> dict[date, np.ndarray]:
        return self._by_cow.get(cow_id, {})

    def cows(self) -> list[str]:
        return sorted(self._by_cow)

    def dates(self, cow_id: str) -> list[date]:
        return sorted(self.series(cow_id))


def channel_of(feature_name: str) -> str:
    """Sensor channel a feature column was derived from."""
    for part in feature_name.split("*")[0].split(":"):
        if part in CHANNELS:
            return part
    raise ValueError(f"no channel in feature name {feature_name!r}")


# --------------------------------------------------------------------------
# detection


def detection_feature_names(n_days: int = DETECTION_DAYS, include_day0: bool = False) -> list[str]:
    offsets = list(range(-n_days, 1 if include_day0 else 0))
    return [f"d{o}:{c}" for o in offsets for c in CHANNELS]


def detection_features(
    series: Mapping[date, Sequence[float]],
    day0: date,
    n_days: int = DETECTION_DAYS,
    include_day0: bool = False,
) -> np.ndarray:
    """Channel values for days -7..-1 (optionally through day 0), day-major.

    Raises ``IncompleteDataError("incomplete_sensor_history")`` on any gap.
    """
    offsets = range(-n_days, 1 if include_day0 else 0)
    out = []
    for o in offsets:
        day = day0 + timedelta(days=o)
        if day not in series:
            raise IncompleteDataError("incomplete_sensor_history", f"no sensor record on {day} (day {o})")
        out.extend(series[day])
    return np.asarray(out, dtype=float)


# --------------------------------------------------------------------------
# lag / window


@dataclass(frozen=True)
class LagWindowConfig:
    lag: int
    window: int
    aggregates: tuple[str, ...] = AGGREGATES

    def __post_init__(self):
        if self.lag < 1 or self.window < 1:
            raise ValueError(f"lag and window must be >= 1, got lag={self.lag}, window={self.window}")
        bad = [a for a in self.aggregates if a not in AGGREGATES]
        if bad or not self.aggregates:
            raise ValueError(f"aggregates must be a non-empty subset of {AGGREGATES}, got {self.aggregates}")

    def days(self, reference_day: date) -> list[date]:
        """The ``window`` days ``[ref - (lag + window - 1), ref - lag]``."""
        first = reference_day - timedelta(days=self.lag + self.window - 1)
        return [first + timedelta(days=i) for i in range(self.window)]

    def feature_names(self) -> list[str]:
        return [f"{c}:{a}" for c in CHANNELS for a in self.aggregates]


def lagwindow_features(series: Mapping[date, Sequence[float]], config: LagWindowConfig, reference_day: date) -> np.ndarray:
    """Rolling aggregates over the window ending ``lag`` days before
    ``reference_day``, ordered channel-major then aggregate.

    ``std`` is the population standard deviation, so a one-day window gives 0.
    """
    days = config.days(reference_day)
    missing = [d for d in days if d not in series]
    if missing:
        raise IncompleteDataError("incomplete_window", f"no sensor record on {missing[0]}")
    block = np.array([series[d] for d in days], dtype=float)
    w = len(days)
    total = block.sum(axis=0)
    mean = total / w
    aggs = {
        "sum": total,
        "mean": mean,
        "std": np.sqrt(((block - mean) ** 2).sum(axis=0) / w),
    }
    return np.array([aggs[a][j] for j in range(block.shape[1]) for a in config.aggregates], dtype=float)


# --------------------------------------------------------------------------
# min-max scaling


@dataclass(frozen=True)
class MinMaxParams:
    minimum: np.ndarray
    maximum: np.ndarray
    feature_names: tuple[str, ...] = ()


def fit_minmax(train) -> MinMaxParams:
    names: tuple[str, ...] = ()
    if isinstance(train, FeatureMatrix):
        names, train = train.feature_names, train.X
    X = np.asarray(train, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("cannot fit min-max scaling on an empty training matrix")
    return MinMaxParams(X.min(axis=0), X.max(axis=0), names)


def apply_minmax(params: MinMaxParams, matrix):
    """``(x - min) / (max - min)`` per column; constant columns map to 0 and
    values outside the fitted range are left unclipped."""
    X = matrix.X if isinstance(matrix, FeatureMatrix) else np.asarray(matrix, dtype=float)
    span = params.maximum - params.minimum
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (X - params.minimum) / safe, 0.0)
    if isinstance(matrix, FeatureMatrix):
        return FeatureMatrix(matrix.feature_names, out, matrix.y, matrix.groups)
    return out


class MinMaxScaler(BaseEstimator, TransformerMixin):
    def fit(self, X, y=None):
        self.params_ = fit_minmax(check_array(X, dtype=float))
        self.n_features_in_ = len(self.params_.minimum)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return apply_minmax(self.params_, X)


# --------------------------------------------------------------------------
# polynomial expansion


def _poly_pairs(c: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(c)


def poly2_expand(X) -> np.ndarray:
    """Originals followed by every product ``x_i * x_j`` with ``i <= j`` in
    lexicographic order; no bias column. Accepts one row or a 2-D array."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    i, j = _poly_pairs(X2.shape[1])
    out = np.hstack([X2, X2[:, i] * X2[:, j]])
    return out[0] if single else out


def poly2_names(names: Sequence[str]) -> list[str]:
    i, j = _poly_pairs(len(names))
    return list(names) + [f"{names[a]}*{names[b]}" for a, b in zip(i, j)]


class PolynomialExpander(BaseEstimator, TransformerMixin):
    def fit(self, X, y=None):
        self.n_features_in_ = check_array(X, dtype=float).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return poly2_expand(X)

    def get_feature_names_out(self, input_features=None):
        if input_features is None:
            input_features = [f"x{i}" for i in range(self.n_features_in_)]
        return np.array(poly2_names(list(input_features)), dtype=object)


# --------------------------------------------------------------------------
# correlation


def pearson_matrix(matrix) -> np.ndarray:
    """Pearson correlation between columns.

    A zero-variance column correlates 0 with every other column and 1 with
    itself.
    """
    X = matrix.X if isinstance(matrix, FeatureMatrix) else np.asarray(matrix, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pearson_matrix needs at least 2 rows")
    centered = X - X.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    ok = norms > 0
    unit = np.where(ok, centered / np.where(ok, norms, 1.0), 0.0)
    r = np.clip(unit.T @ unit, -1.0, 1.0)
    r = (r + r.T) / 2.0
    np.fill_diagonal(r, 1.0)
    return r


def write_matrix_csv(names: Sequence[str], values: np.ndarray, stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["feature", *names])
    for name, row in zip(names, values):
        w.writerow([name, *(repr(float(v)) for v in row)])


# --------------------------------------------------------------------------
# under-sampling


def kmeans_undersample_indices(negatives, n_positives: int, seed: int = 0) -> np.ndarray:
    """Sorted row indices kept by :func:`kmeans_undersample`."""
    X = negatives.X if isinstance(negatives, FeatureMatrix) else np.asarray(negatives, dtype=float)
    n = len(X)
    if n_positives < 1:
        raise ValueError("n_positives must be >= 1")
    if n_positives > n:
        raise ValueError(f"n_positives ({n_positives}) exceeds the number of negatives ({n})")
    if n_positives == n:
        return np.arange(n)
    # centroids only need to be representative, so Lloyd alone will do
    res = kmeans(X, n_positives, seed=seed, n_init=3, refine=False)
    chosen: list[int] = []
    taken = np.zeros(n, dtype=bool)
    for j, c in enumerate(res.centroids):
        d2 = ((X - c) ** 2).sum(axis=1)
        members = (res.labels == j) & ~taken
        idx = np.flatnonzero(members if members.any() else ~taken)
        pick = int(idx[np.argmin(d2[idx])])
        taken[pick] = True
        chosen.append(pick)
    out = np.array(sorted(chosen), dtype=int)
    assert len(out) == n_positives and len(np.unique(out)) == n_positives
    return out


def kmeans_undersample(negatives: FeatureMatrix, n_positives: int, seed: int = 0) -> FeatureMatrix:
    """Shrink the negative rows to ``n_positives`` cluster representatives.

    Clusters the rows with k-means (k = ``n_positives``) and keeps, for each
    cluster, the member row closest to its centroid. Only real input rows
    survive and no row is kept twice.
    """
    return negatives.take(kmeans_undersample_indices(negatives, n_positives, seed))
