"""End-to-end experiments: day-0 detection, channel importance and the
lag x window prediction sweep."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, is_dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import IO, Sequence

import numpy as np
from joblib import Parallel, delayed

from ._seeding import derive_seed
from .automl import (
    _USES,
    GaConfig,
    GrammarBounds,
    PipelineSpec,
    evaluate_pipeline,
    ga_search,
    grid_refine,
)
from .featurize import (
    BehaviorTable,
    LagWindowConfig,
    apply_minmax,
    channel_of,
    detection_feature_names,
    detection_features,
    fit_minmax,
    kmeans_undersample_indices,
    lagwindow_features,
)
from .herd_data import (
    CHANNELS,
    BehaviorDay,
    CowProfile,
    Episode,
    FeatureMatrix,
    LesionObservation,
    derive_episodes,
    grouped_kfold,
    grouped_split,
    match_controls,
    parse_behavior,
    parse_lesions,
    parse_profiles,
)

REPORT_SCHEMA = "ddwatch.detection_report/1"
Z_95_ONE_SIDED = 1.645
CASE_NEGATIVE_GAP = 7


class InsufficientDataError(ValueError):
    def __init__(self, reason: str, message: str):
        self.reason = reason
        super().__init__(message)


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, date):
        return obj.isoformat()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_digest(*parts) -> str:
    text = json.dumps(_jsonable(list(parts)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# herd container


@dataclass
class Herd:
    behavior: list[BehaviorDay]
    lesions: list[LesionObservation]
    profiles: list[CowProfile]

    @classmethod
    def from_paths(cls, behavior: str | Path, lesions: str | Path, profiles: str | Path) -> "Herd":
        def read(path, parser):
            with open(path, newline="", encoding="utf-8") as fh:
                return parser(fh)

        return cls(read(behavior, parse_behavior), read(lesions, parse_lesions), read(profiles, parse_profiles))

    @classmethod
    def from_dir(cls, directory: str | Path) -> "Herd":
        d = Path(directory)
        return cls.from_paths(d / "behavior.csv", d / "lesions.csv", d / "profiles.csv")

    def table(self) -> BehaviorTable:
        if not hasattr(self, "_table"):
            self._table = BehaviorTable(self.behavior)
        return self._table

    def enroll(self) -> tuple[list[Episode], list[tuple[str, str]]]:
        """Enrolled episodes (matched or not) and rejected cows."""
        enrolled, rejected = derive_episodes(self.lesions, self.behavior, self.profiles)
        return match_controls(enrolled, self.profiles, self.behavior, self.lesions), rejected


def matched(episodes: Sequence[Episode]) -> list[Episode]:
    return [e for e in episodes if e.control_cow_id is not None]


def detection_matrix(herd: Herd, episodes: Sequence[Episode] | None = None, include_day0: bool = False) -> FeatureMatrix:
    """One positive row per matched case at its day 0 and one negative row for
    its control anchored on the same calendar day."""
    if episodes is None:
        episodes = herd.enroll()[0]
    table = herd.table()
    rows, labels, groups = [], [], []
    for e in sorted(matched(episodes), key=lambda e: (e.day0, e.case_cow_id)):
        for cow, label in ((e.case_cow_id, 1), (e.control_cow_id, 0)):
            rows.append(detection_features(table.series(cow), e.day0, include_day0=include_day0))
            labels.append(label)
            groups.append(cow)
    names = detection_feature_names(include_day0=include_day0)
    return FeatureMatrix(names, np.array(rows).reshape(len(rows), len(names)), labels, groups)


def with_label_column(matrix: FeatureMatrix, name: str = "dd") -> FeatureMatrix:
    return FeatureMatrix((*matrix.feature_names, name), np.column_stack([matrix.X, matrix.y]), matrix.y, matrix.groups)


def accuracy(model, matrix: FeatureMatrix) -> float:
    return float(np.mean(model.predict(matrix.X) == matrix.y))


def lower_bound_95(accuracy: float, std: float) -> float:
    """One-sided 95% normal lower bound ``accuracy - 1.645 * std``."""
    if std < 0:
        raise ValueError("std must be >= 0")
    return accuracy - Z_95_ONE_SIDED * std


# --------------------------------------------------------------------------
# detection


def default_grid() -> dict[str, list]:
    return {"n_trees": [50, 100], "max_depth": [None, 6], "k": [3, 5, 7], "rf_weight": [0.3, 0.5, 0.7]}


@dataclass
class DetectionConfig:
    test_fraction: float = 0.2
    k: int = 5
    ga: GaConfig = field(default_factory=GaConfig)
    bounds: GrammarBounds = field(default_factory=GrammarBounds)
    grid: dict = field(default_factory=default_grid)
    include_day0: bool = False
    seed: int = 0


@dataclass
class DetectionReport:
    best: PipelineSpec
    cv_mean: float
    cv_std: float
    cv_folds: tuple[float, ...]
    test_accuracy: float
    lower_bound_95: float
    n_train: int
    n_test: int
    train_cows: tuple[str, ...]
    test_cows: tuple[str, ...]
    ga_best: PipelineSpec
    ga_history: tuple[float, ...]
    seed: int
    config_digest: str
    search_log: list = field(default_factory=list, repr=False)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = _jsonable(self)
        d.pop("search_log")
        return {"schema": REPORT_SCHEMA, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _refine_grid(spec: PipelineSpec, grid: dict) -> dict:
    used = _USES[spec.classifier]
    out = {}
    for name, values in grid.items():
        if name not in used:
            continue
        values = list(values)
        if getattr(spec, name) not in values:
            values.append(getattr(spec, name))
        out[name] = values
    return out


def run_detection(herd_or_matrix, config: DetectionConfig | None = None, n_jobs: int = 1) -> DetectionReport:
    """Grouped train/test split, GA search and grid refinement on the training
    cows, then a final fit scored on the held-out cows."""
    config = config or DetectionConfig()
    if isinstance(herd_or_matrix, FeatureMatrix):
        matrix = herd_or_matrix
    else:
        matrix = detection_matrix(herd_or_matrix, include_day0=config.include_day0)
    n_cases = int(matrix.y.sum())
    if n_cases < 4 or matrix.n_rows - n_cases < 4:
        raise InsufficientDataError("insufficient_episodes", f"need >= 4 matched episodes, have {n_cases}")
    seed = config.seed
    train, test = grouped_split(matrix, config.test_fraction, derive_seed(seed, "split"))
    cv_seed = derive_seed(seed, "cv")
    ga_cfg = GaConfig(**{**asdict(config.ga), "seed": derive_seed(seed, "ga", config.ga.seed)})
    search = ga_search(train, config.bounds, ga_cfg, k=config.k, n_jobs=n_jobs)
    grid = _refine_grid(search.best, config.grid)
    best = grid_refine(search.best, grid, train, config.k, cv_seed) if grid else search.best
    cv = evaluate_pipeline(best, train, config.k, cv_seed)
    model = best.build(derive_seed(seed, "final", best.key())).fit(train.X, train.y)
    test_acc = accuracy(model, test)
    return DetectionReport(
        best=best,
        cv_mean=cv.mean_accuracy,
        cv_std=cv.std,
        cv_folds=cv.fold_accuracies,
        test_accuracy=test_acc,
        lower_bound_95=lower_bound_95(test_acc, cv.std),
        n_train=train.n_rows,
        n_test=test.n_rows,
        train_cows=tuple(train.unique_groups()),
        test_cows=tuple(test.unique_groups()),
        ga_best=search.best,
        ga_history=tuple(search.history),
        seed=seed,
        config_digest=config_digest(config),
        search_log=search.log,
    )


# --------------------------------------------------------------------------
# channel importance


@dataclass
class ChannelImportance:
    channels: tuple[str, ...]
    importance: tuple[float, ...]
    fold_std: tuple[float, ...]
    baseline: float
    deltas: tuple[float, ...]

    def to_csv(self, stream: IO[str]) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["channel", "importance", "fold_std"])
        for c, imp, s in zip(self.channels, self.importance, self.fold_std):
            w.writerow([c, f"{imp:.6f}", f"{s:.6f}"])


def channel_importance(spec: PipelineSpec, matrix: FeatureMatrix, k: int = 5, seed: int = 0) -> ChannelImportance:
    """Drop-one-channel importance.

    For each channel, every column derived from it is removed and grouped CV
    rerun; the accuracy drop (negative drops clipped to 0) is normalized to
    sum to 1, uniform when no channel matters. ``fold_std`` is the std over
    folds of the per-fold accuracy drop.
    """
    base = evaluate_pipeline(spec, matrix, k, seed)
    base_folds = np.array(base.fold_accuracies)
    owner = [channel_of(n) for n in matrix.feature_names]
    deltas, stds = [], []
    for ch in CHANNELS:
        keep = [j for j, o in enumerate(owner) if o != ch]
        if len(keep) == len(owner):
            deltas.append(0.0)
            stds.append(0.0)
            continue
        reduced = evaluate_pipeline(spec, matrix.select(keep), k, seed)
        per_fold = base_folds - np.array(reduced.fold_accuracies)
        deltas.append(base.mean_accuracy - reduced.mean_accuracy)
        stds.append(float(per_fold.std()))
    clipped = np.clip(np.array(deltas), 0.0, None)
    total = clipped.sum()
    imp = clipped / total if total > 0 else np.full(len(CHANNELS), 1.0 / len(CHANNELS))
    return ChannelImportance(CHANNELS, tuple(float(v) for v in imp), tuple(stds), base.mean_accuracy, tuple(deltas))


# --------------------------------------------------------------------------
# lag x window sweep


@dataclass
class SweepConfig:
    """``positive_days`` lesion days per case (from day 0 on) act as positive
    reference days; ``negatives`` is ``"all"`` (controls plus early case
    days) or ``"controls"``."""

    pipeline: PipelineSpec = field(default_factory=PipelineSpec)
    test_fraction: float = 0.2
    positive_days: int = 4
    negatives: str = "all"
    aggregates: tuple[str, ...] = ("mean", "sum", "std")


@dataclass
class SweepCell:
    lag: int
    window: int
    accuracy: float | None
    reason: str | None = None
    n_train: int = 0
    n_test: int = 0
    train_cows: tuple[str, ...] = ()
    test_cows: tuple[str, ...] = ()


@dataclass
class SweepGrid:
    lags: tuple[int, ...]
    windows: tuple[int, ...]
    train_n: int
    test_n: int
    cells: list[SweepCell]

    def accuracy(self) -> np.ndarray:
        """lags x windows matrix, NaN for null cells."""
        out = np.full((len(self.lags), len(self.windows)), np.nan)
        for c in self.cells:
            if c.accuracy is not None:
                out[self.lags.index(c.lag), self.windows.index(c.window)] = c.accuracy
        return out

    def cell(self, lag: int, window: int) -> SweepCell:
        return next(c for c in self.cells if c.lag == lag and c.window == window)

    def to_csv(self, stream: IO[str]) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["lag", *self.windows])
        acc = self.accuracy()
        for i, lag in enumerate(self.lags):
            w.writerow([lag, *("" if math.isnan(v) else f"{v:.4f}" for v in acc[i])])


def _lesion_days(herd: Herd) -> dict[str, set[date]]:
    out: dict[str, set[date]] = {}
    for o in herd.lesions:
        if o.present:
            out.setdefault(o.cow_id, set()).add(o.date)
    return out


def prediction_samples(herd: Herd, episodes: Sequence[Episode], lw: LagWindowConfig, config: SweepConfig) -> tuple[FeatureMatrix, FeatureMatrix]:
    """All positive and all candidate negative rows for one (lag, window)."""
    table = herd.table()
    lesion = _lesion_days(herd)
    names = lw.feature_names()
    pos, neg = [], []

    def add(bucket, cow, ref):
        series = table.series(cow)
        if all(d in series for d in lw.days(ref)):
            bucket.append((cow, lagwindow_features(series, lw, ref)))

    for e in sorted(matched(episodes), key=lambda e: e.case_cow_id):
        for j in range(config.positive_days):
            ref = e.day0 + timedelta(days=j)
            if ref not in lesion.get(e.case_cow_id, ()):
                break
            add(pos, e.case_cow_id, ref)
        last_clean = e.day0 - timedelta(days=CASE_NEGATIVE_GAP)
        if config.negatives == "all":
            for ref in table.dates(e.case_cow_id):
                if ref - timedelta(days=lw.lag) <= last_clean:
                    add(neg, e.case_cow_id, ref)
        for ref in table.dates(e.control_cow_id):
            add(neg, e.control_cow_id, ref)

    def as_matrix(bucket, label):
        X = np.array([v for _, v in bucket]).reshape(len(bucket), len(names))
        return FeatureMatrix(names, X, [label] * len(bucket), [c for c, _ in bucket])

    return as_matrix(pos, 1), as_matrix(neg, 0)


def _balanced_cohort(pos: FeatureMatrix, neg: FeatureMatrix, seed: int) -> FeatureMatrix:
    if neg.n_rows > pos.n_rows and pos.n_rows > 0:
        # cluster on min-max scaled copies so no channel dominates by units
        scaled = apply_minmax(fit_minmax(neg), neg)
        neg = neg.take(kmeans_undersample_indices(scaled, pos.n_rows, seed))
    return FeatureMatrix.concat([pos, neg])


def _draw(cohort: FeatureMatrix, n: int, rng: np.random.Generator) -> FeatureMatrix | None:
    """Exactly ``n`` rows, half positive (the odd one negative), or None."""
    n_pos = n // 2
    pos = np.flatnonzero(cohort.y == 1)
    neg = np.flatnonzero(cohort.y == 0)
    if len(pos) < n_pos or len(neg) < n - n_pos:
        return None
    rows = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n - n_pos, replace=False)])
    return cohort.take(np.sort(rows))


def sweep_cell(herd: Herd, episodes, lag: int, window: int, train_n: int, test_n: int, config: SweepConfig, seed: int) -> SweepCell:
    cell_seed = derive_seed(seed, lag, window)
    lw = LagWindowConfig(lag, window, tuple(config.aggregates))
    pos, neg = prediction_samples(herd, episodes, lw, config)
    if pos.n_rows == 0 or neg.n_rows == 0:
        return SweepCell(lag, window, None, "insufficient_samples")
    both = FeatureMatrix.concat([pos, neg])
    try:
        train, test = grouped_split(both, config.test_fraction, derive_seed(cell_seed, 0), stratify=True)
    except ValueError:
        return SweepCell(lag, window, None, "insufficient_samples")
    cohorts = []
    for i, part in enumerate((train, test)):
        p = part.take(np.flatnonzero(part.y == 1))
        n = part.take(np.flatnonzero(part.y == 0))
        cohorts.append(_balanced_cohort(p, n, derive_seed(cell_seed, 1, i)))
    rng = np.random.default_rng(derive_seed(cell_seed, 2))
    tr = _draw(cohorts[0], train_n, rng)
    te = _draw(cohorts[1], test_n, rng)
    if tr is None or te is None:
        return SweepCell(lag, window, None, "insufficient_samples")
    model = config.pipeline.build(derive_seed(cell_seed, 3)).fit(tr.X, tr.y)
    return SweepCell(lag, window, accuracy(model, te), None, tr.n_rows, te.n_rows,
                     tuple(tr.unique_groups()), tuple(te.unique_groups()))


def run_sweep(
    herd: Herd,
    lags: Sequence[int] = (1, 2, 3, 4),
    windows: Sequence[int] = (1, 2, 3, 4, 5),
    train_n: int = 98,
    test_n: int = 28,
    config: SweepConfig | None = None,
    seed: int = 0,
    n_jobs: int = 1,
) -> SweepGrid:
    """Test accuracy of the configured pipeline for every (lag, window).

    Per cell: lag/window features for positive and negative reference days,
    a stratified grouped split, k-means balancing of negatives within each
    side, and a seeded draw of exactly ``train_n``/``test_n`` rows. Cells that
    cannot supply enough rows come back null with a reason.
    """
    config = config or SweepConfig()
    episodes = herd.enroll()[0]
    herd.table()
    jobs = [(l, w) for l in lags for w in windows]
    if n_jobs == 1:
        cells = [sweep_cell(herd, episodes, l, w, train_n, test_n, config, seed) for l, w in jobs]
    else:
        cells = Parallel(n_jobs=n_jobs)(
            delayed(sweep_cell)(herd, episodes, l, w, train_n, test_n, config, seed) for l, w in jobs
        )
    return SweepGrid(tuple(lags), tuple(windows), train_n, test_n, cells)


def lag_inversions(grid: SweepGrid) -> list[tuple[int, int, float]]:
    """(window, lag, rise) for every step where accuracy rises with lag."""
    acc = grid.accuracy()
    out = []
    for j, w in enumerate(grid.windows):
        col = acc[:, j]
        for i in range(len(col) - 1):
            if np.isfinite(col[i]) and np.isfinite(col[i + 1]) and col[i + 1] > col[i]:
                out.append((w, grid.lags[i + 1], float(col[i + 1] - col[i])))
    return out


def audit_groups(pairs) -> None:
    """Raise if any (train cows, test cows) pair shares a cow."""
    for train, test in pairs:
        shared = set(train) & set(test)
        if shared:
            raise AssertionError(f"cow ids on both sides of a split: {sorted(shared)}")
