import io
import json

import numpy as np
import pytest

from conftest import random_matrix
from ddwatch.automl import GaConfig, GrammarBounds, PipelineSpec
from ddwatch.evaluate import (
    DetectionConfig,
    InsufficientDataError,
    SweepCell,
    SweepConfig,
    SweepGrid,
    audit_groups,
    channel_importance,
    detection_matrix,
    lag_inversions,
    lower_bound_95,
    prediction_samples,
    run_detection,
    run_sweep,
)
from ddwatch.featurize import LagWindowConfig
from ddwatch.herd_data import CHANNELS

FAST = PipelineSpec(classifier="rf", n_trees=10, expander="none")
FAST_DETECT = DetectionConfig(
    ga=GaConfig(population=4, generations=1),
    bounds=GrammarBounds(n_trees=(10,), expander=("none",)),
    grid={"k": [3, 5]},
)


@pytest.mark.parametrize("acc, std, expected", [(0.792, 0.046, 0.71633), (0.5, 0.1, 0.3355), (0.8, 0.0, 0.8)])
def test_lower_bound_95(acc, std, expected):
    assert lower_bound_95(acc, std) == pytest.approx(expected, abs=1e-12)


def test_lower_bound_rejects_negative_std():
    with pytest.raises(ValueError):
        lower_bound_95(0.8, -0.01)


def test_detection_matrix_layout(strong_herd):
    m = detection_matrix(strong_herd)
    assert m.X.shape == (42, 42) and int(m.y.sum()) == 21
    assert len(m.unique_groups()) == 42
    episodes = strong_herd.enroll()[0]
    table = strong_herd.table()
    e = episodes[0]
    row = list(m.groups).index(e.control_cow_id)
    assert np.array_equal(m.X[row, :6], table.series(e.control_cow_id)[e.day0 - np.timedelta64(7, "D").item()])


def test_run_detection_report(strong_herd):
    rep = run_detection(strong_herd, FAST_DETECT)
    assert rep.n_train + rep.n_test == 42 and not set(rep.train_cows) & set(rep.test_cows)
    assert 0.0 <= rep.test_accuracy <= 1.0 and rep.lower_bound_95 <= rep.test_accuracy
    assert rep.lower_bound_95 == rep.test_accuracy - 1.645 * rep.cv_std
    d = json.loads(rep.to_json())
    assert d["schema"] == "ddwatch.detection_report/1" and "search_log" not in d
    assert run_detection(strong_herd, FAST_DETECT).to_json() == rep.to_json()


def test_run_detection_needs_episodes(rng):
    m = random_matrix(rng, 6, (1, 1), 3)
    with pytest.raises(InsufficientDataError):
        run_detection(m, FAST_DETECT)


def test_importance_is_normalized(rng):
    m = detection_matrix_like(rng)
    imp = channel_importance(PipelineSpec(classifier="knn", k=3, expander="none"), m, k=3, seed=1)
    assert imp.channels == CHANNELS
    assert sum(imp.importance) == pytest.approx(1.0) and min(imp.importance) >= 0.0
    out = io.StringIO()
    imp.to_csv(out)
    assert out.getvalue().splitlines()[0] == "channel,importance,fold_std"


def detection_matrix_like(rng):
    from ddwatch.featurize import detection_feature_names
    from ddwatch.herd_data import FeatureMatrix

    names = detection_feature_names()
    y = np.array([1, 0] * 12)
    X = rng.normal(size=(24, len(names)))
    return FeatureMatrix(names, X, y, [f"c{i}" for i in range(24)])


def test_prediction_samples_rules(strong_herd):
    episodes = strong_herd.enroll()[0]
    lw = LagWindowConfig(2, 3)
    pos, neg = prediction_samples(strong_herd, episodes, lw, SweepConfig())
    assert pos.n_rows >= 21 and set(pos.y) == {1} and set(neg.y) == {0}
    assert set(pos.unique_groups()) == {e.case_cow_id for e in episodes}
    _, controls = prediction_samples(strong_herd, episodes, lw, SweepConfig(negatives="controls"))
    assert set(controls.unique_groups()) == {e.control_cow_id for e in episodes}


def test_sweep_sizes_and_determinism(strong_herd):
    cfg = SweepConfig(pipeline=FAST)
    a = run_sweep(strong_herd, lags=(1, 3), windows=(1, 3), config=cfg, seed=4)
    b = run_sweep(strong_herd, lags=(1, 3), windows=(1, 3), config=cfg, seed=4, n_jobs=2)
    assert a.cells == b.cells
    for c in a.cells:
        assert (c.n_train, c.n_test) == (98, 28) and c.accuracy is not None
    audit_groups((c.train_cows, c.test_cows) for c in a.cells)


def test_sweep_null_cell_when_infeasible(strong_herd):
    grid = run_sweep(strong_herd, lags=(1,), windows=(2,), train_n=5000, test_n=28, config=SweepConfig(pipeline=FAST))
    assert grid.cells[0].accuracy is None and grid.cells[0].reason == "insufficient_samples"
    out = io.StringIO()
    grid.to_csv(out)
    assert out.getvalue() == "lag,2\n1,\n"


def test_lag_inversions():
    cells = [SweepCell(1, 1, 0.9), SweepCell(2, 1, 0.8), SweepCell(3, 1, 0.85), SweepCell(4, 1, None)]
    grid = SweepGrid((1, 2, 3, 4), (1,), 98, 28, cells)
    (w, lag, rise), = lag_inversions(grid)
    assert (w, lag) == (1, 3) and rise == pytest.approx(0.05)


def test_audit_groups_detects_overlap():
    with pytest.raises(AssertionError):
        audit_groups([(("a", "b"), ("b",))])
