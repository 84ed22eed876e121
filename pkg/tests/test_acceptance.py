"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import itertools
import math
import time
from datetime import timedelta

import numpy as np
import pytest

from conftest import day, random_matrix
from test_learners import gini_oracle
from ddwatch.automl import GaConfig, GrammarBounds, PipelineSpec, evaluate_pipeline, ga_search, grid_points, grid_refine
from ddwatch.evaluate import (
    DetectionConfig,
    Herd,
    SweepConfig,
    audit_groups,
    channel_importance,
    detection_matrix,
    lag_inversions,
    lower_bound_95,
    run_detection,
    run_sweep,
)
from ddwatch.featurize import LagWindowConfig, kmeans_undersample_indices, lagwindow_features, pearson_matrix, poly2_expand
from ddwatch.herd_data import grouped_kfold, grouped_split
from ddwatch.learners import KNearestNeighbors, best_split, kmeans
from ddwatch.synthherd import SynthConfig, build


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail, elapsed, limit):
        ok = bool(ok) and elapsed < limit
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({elapsed:.1f}s, limit {limit:.0f}s)")
        assert ok, f"{name}: {detail} in {elapsed:.1f}s"

    return emit


def test_leakage_audit(report):
    t = time.perf_counter()
    overlaps = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = random_matrix(rng, int(rng.integers(5, 60)), (1, 6), 2)
        train, test = grouped_split(m, float(rng.uniform(0.1, 0.5)), seed, stratify=bool(seed % 2))
        pairs = [(train.groups, test.groups)]
        k = int(rng.integers(2, min(10, len(m.unique_groups())) + 1))
        pairs += [(tr.groups, va.groups) for tr, va in grouped_kfold(m, k, seed)]
        for tr, te in pairs:
            overlaps += sum(1 for a in set(tr) for b in set(te) if a == b)  # exhaustive pairwise scan
        audit_groups(pairs)
    report("leakage audit", overlaps == 0, f"100 runs, {overlaps} shared cow ids", time.perf_counter() - t, 10)


def _lagwindow_oracle(series, lag, window, ref):
    out = []
    for c in range(6):
        xs = [series[ref - timedelta(days=d)][c] for d in range(lag, lag + window)]
        mean = sum(xs) / window
        out += [mean, sum(xs), math.sqrt(sum((x - mean) ** 2 for x in xs) / window)]
    return out


def _pearson_oracle(X):
    n, c = X.shape
    cols = [list(X[:, j]) for j in range(c)]
    means = [sum(col) / n for col in cols]
    out = np.eye(c)
    for i in range(c):
        for j in range(c):
            if i == j:
                continue
            cov = sum((a - means[i]) * (b - means[j]) for a, b in zip(cols[i], cols[j]))
            vi = sum((a - means[i]) ** 2 for a in cols[i])
            vj = sum((b - means[j]) ** 2 for b in cols[j])
            out[i, j] = 0.0 if vi == 0 or vj == 0 else cov / math.sqrt(vi * vj)
    return out


def test_featurization_oracles(report):
    t = time.perf_counter()
    worst = 0.0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        lag, window = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        n = lag + window + 2
        series = {day(i): rng.normal(size=6) * rng.uniform(0.01, 40) for i in range(n)}
        ref = day(n - 1)
        got = lagwindow_features(series, LagWindowConfig(lag, window), ref)
        worst = max(worst, float(np.max(np.abs(got - _lagwindow_oracle(series, lag, window, ref)))))
        X = rng.normal(size=(int(rng.integers(2, 25)), int(rng.integers(1, 7))))
        if rng.random() < 0.2:
            X[:, int(rng.integers(X.shape[1]))] = rng.normal()
        worst = max(worst, float(np.max(np.abs(pearson_matrix(X) - _pearson_oracle(X)))))
    lengths = all(poly2_expand(np.ones(c)).shape == (c + c * (c + 1) // 2,) for c in range(1, 65))
    report("featurization oracles", worst < 1e-9 and lengths,
           f"1000 instances, max |delta| {worst:.2e}, poly2 lengths ok={lengths}", time.perf_counter() - t, 30)


def _best_two_partition(points):
    best = np.inf
    for mask in itertools.product((0, 1), repeat=len(points) - 1):
        labels = np.array((0,) + mask)
        if labels.all() or not labels.any():
            continue
        best = min(best, sum(float(((points[labels == c] - points[labels == c].mean(axis=0)) ** 2).sum()) for c in (0, 1)))
    return best


def _knn_oracle(X, y, q, k):
    ranked = sorted(range(len(X)), key=lambda i: (float(((X[i] - q) ** 2).sum()), i))
    k = min(k, len(X))
    return sum(int(y[i]) for i in ranked[:k]) / k


def test_learner_oracles(report):
    t = time.perf_counter()
    cart_bad = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n, c = int(rng.integers(2, 51)), int(rng.integers(1, 6))
        X = rng.integers(0, int(rng.integers(2, 12)), size=(n, c)).astype(float)
        y = rng.integers(0, 2, n)
        got = best_split(X, y, range(c))
        want = gini_oracle(X, y)
        cart_bad += (got is None) != (want is None) or (got is not None and got[:2] != want)
    km_bad = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(int(rng.integers(3, 13)), 2))
        res = kmeans(pts, 2, seed=seed)
        monotone = all(a >= b for a, b in zip(res.inertia_history, res.inertia_history[1:]))
        km_bad += not monotone or abs(res.inertia - _best_two_partition(pts)) > 1e-9
    knn_bad = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = rng.integers(0, 5, size=(int(rng.integers(1, 30)), 3)).astype(float)
        y = rng.integers(0, 2, len(X))
        k = int(rng.integers(1, 12))
        Q = rng.integers(0, 5, size=(10, 3)).astype(float)
        p = KNearestNeighbors(k).fit(X, y).predict_proba(Q)[:, 1]
        knn_bad += sum(abs(p[i] - _knn_oracle(X, y, q, k)) > 1e-12 for i, q in enumerate(Q))
    report("learner oracles", cart_bad == km_bad == knn_bad == 0,
           f"CART mismatches {cart_bad}/200, k-means mismatches {km_bad}/100, kNN mismatches {knn_bad}/500",
           time.perf_counter() - t, 60)


def test_undersampling_contract(report):
    t = time.perf_counter()
    bad = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n_pos = int(rng.integers(1, 30))
        n_neg = n_pos if seed % 10 == 0 else int(rng.integers(n_pos, 4 * n_pos + 2))
        neg = rng.normal(size=(n_neg, int(rng.integers(1, 6))))
        idx = kmeans_undersample_indices(neg, n_pos, seed)
        ok = len(idx) == n_pos and len(set(idx.tolist())) == n_pos and all(0 <= i < n_neg for i in idx)
        if n_neg == n_pos:
            ok = ok and sorted(idx.tolist()) == list(range(n_neg))
        bad += not ok
    report("under-sampling contract", bad == 0, f"200 instances, {bad} violations", time.perf_counter() - t, 10)


def test_search_invariants(report, strong_herd):
    t = time.perf_counter()
    bounds = GrammarBounds(n_trees=(10, 25), max_depth=(None, 3, 6))
    monotone = 0
    for seed in range(10):
        m = random_matrix(np.random.default_rng(seed), 16, (2, 2), 4)
        res = ga_search(m, bounds, GaConfig(population=6, generations=4, seed=seed), k=4)
        monotone += all(a <= b for a, b in zip(res.history, res.history[1:]))
    m = random_matrix(np.random.default_rng(99), 16, (2, 2), 4)
    spec = PipelineSpec(n_trees=10, expander="none")
    grid = {"n_trees": [10, 25], "k": [1, 3, 5]}
    history = []
    best = grid_refine(spec, grid, m, 4, 7, history)
    replay = [(p, evaluate_pipeline(p, m, 4, 7).mean_accuracy) for p in grid_points(spec, grid)]
    top = max(a for _, a in replay)
    grid_ok = len(history) == 6 and best == next(p for p, a in replay if a == top)
    cfg = DetectionConfig(ga=GaConfig(population=8, generations=2), seed=11)
    a, b = run_detection(strong_herd, cfg), run_detection(strong_herd, cfg)
    repro = a.to_json() == b.to_json() and a.search_log == b.search_log
    report("search invariants", monotone == 10 and grid_ok and repro,
           f"monotone traces {monotone}/10, grid 6 evaluations replayed={grid_ok}, detection reproducible={repro}",
           time.perf_counter() - t, 180)


def test_planted_signal(report):
    t = time.perf_counter()
    sh = build(SynthConfig(n_cases=21, lead_days=4, shifts={"active": -15.0}, seed=3))
    herd = Herd(sh.behavior, sh.lesions, sh.profiles)
    episodes = herd.enroll()[0]
    n_pairs = sum(e.control_cow_id is not None for e in episodes)
    det = run_detection(herd, DetectionConfig(seed=0))
    imp = channel_importance(det.best, detection_matrix(herd), 5, 0)
    active = dict(zip(imp.channels, imp.importance))["active"]
    grid = run_sweep(herd, seed=0)
    sizes = all((c.n_train, c.n_test) == (98, 28) and c.accuracy is not None for c in grid.cells)
    inv = lag_inversions(grid)
    inv_ok = len(inv) <= 1 and all(rise <= 0.05 for _, _, rise in inv)
    audit_groups([(det.train_cows, det.test_cows)] + [(c.train_cows, c.test_cows) for c in grid.cells])
    report("planted signal", n_pairs == 21 and det.test_accuracy >= 0.90 and active > 0.8 and sizes and inv_ok,
           f"{n_pairs} matched pairs, test accuracy {det.test_accuracy:.3f}, active importance {active:.3f}, "
           f"all cells 98/28={sizes}, lag inversions {inv}", time.perf_counter() - t, 300)


def test_null_calibration(report):
    t = time.perf_counter()
    det_cfg = dict(ga=GaConfig(population=4, generations=1), bounds=GrammarBounds(n_trees=(10, 25)), grid={})
    sweep_cfg = SweepConfig(pipeline=PipelineSpec(n_trees=10))
    dets, cells = [], []
    for seed in range(20):
        sh = build(SynthConfig(shifts={}, seed=1000 + seed))
        herd = Herd(sh.behavior, sh.lesions, sh.profiles)
        dets.append(run_detection(herd, DetectionConfig(seed=seed, **det_cfg)).test_accuracy)
        cells.append(run_sweep(herd, config=sweep_cfg, seed=seed).accuracy())
    det_mean = float(np.mean(dets))
    cell_means = np.mean(cells, axis=0)
    ok = abs(det_mean - 0.5) <= 0.12 and np.all(np.abs(cell_means - 0.5) <= 0.12)
    report("null calibration", ok,
           f"detection mean {det_mean:.3f}, sweep cell means in [{cell_means.min():.3f}, {cell_means.max():.3f}]",
           time.perf_counter() - t, 300)


def test_reference_lower_bound(report):
    t = time.perf_counter()
    value = lower_bound_95(0.792, 0.046)
    report("reference lower bound", 0.71 <= value <= 0.72, f"lower_bound_95(0.792, 0.046) = {value:.5f}",
           time.perf_counter() - t, 1)
