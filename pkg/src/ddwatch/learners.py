"""Classical learners written from scratch: CART, random forest, k-nearest
neighbors, k-means and a soft-voting ensemble.

The classifiers follow the scikit-learn estimator protocol (``fit``,
``predict_proba``, ``predict``, ``get_params``) so they drop into
``sklearn.pipeline.Pipeline`` and friends. Binary labels only. Every
probability threshold tie (proba == 0.5) resolves to the positive class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._seeding import check_seed, derive_seed

THRESHOLD = 0.5
_LEAF = -1
# exact Gini ties land within this of each other; distinct rational gains on
# <= 10^4 rows differ by far more
_GAIN_TOL = 1e-12


def _check_binary(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary (0/1)")
    return y.astype(int)


def _threshold(proba) -> np.ndarray:
    return (np.asarray(proba) >= THRESHOLD).astype(int)


# --------------------------------------------------------------------------
# CART


@dataclass(frozen=True)
class TreeNode:
    """Leaf (``feature is None``) or binary split ``x[feature] <= threshold``."""

    proba: tuple[float, float]
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


def best_split(X: np.ndarray, y: np.ndarray, features) -> tuple[int, float, float] | None:
    """Best Gini split over ``features``: ``(feature, threshold, gain)``.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values. Ties go to the lowest feature index, then the lowest threshold.
    Returns None when no considered feature varies.
    """
    n = len(y)
    features = np.sort(np.asarray(features, dtype=int))
    cols = X[:, features]
    order = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, order, axis=0)
    ys = y[order]
    n1 = ys.sum(axis=0)[0] if ys.ndim == 2 else ys.sum()
    left1 = np.cumsum(ys, axis=0)[:-1].astype(float)
    nl = np.arange(1, n, dtype=float)[:, None]
    nr = n - nl
    right1 = n1 - left1
    # sum over children of (n_c1^2 + n_c0^2) / n_c; larger means purer children
    score = (left1 ** 2 + (nl - left1) ** 2) / nl + (right1 ** 2 + (nr - right1) ** 2) / nr
    valid = xs[1:] > xs[:-1]
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    best = score.max()
    parent = n - (n1 ** 2 + (n - n1) ** 2) / n
    gain = (parent - (n - best)) / n
    tie = score >= best - _GAIN_TOL * max(1.0, abs(best))
    # columns are in ascending feature order and rows in ascending threshold
    # order, so the first tie in column-major order is the documented winner
    col = int(np.argmax(tie.any(axis=0)))
    row = int(np.argmax(tie[:, col]))
    threshold = (xs[row, col] + xs[row + 1, col]) / 2.0
    return int(features[col]), float(threshold), float(gain)


class DecisionTree(BaseEstimator, ClassifierMixin):
    """CART classifier grown by Gini impurity.

    Growth stops when a node is pure, reaches ``max_depth`` (None for
    unlimited), holds fewer than ``min_samples_split`` rows, or no sampled
    feature varies. ``max_features`` may be None (all), an int, or ``"sqrt"``
    (ceil of the square root of the feature count), drawn per split.
    """

    def __init__(self, max_depth=None, min_samples_split=2, max_features=None, random_state=0):
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.max_features = max_features
        self.random_state = random_state

    def _n_features_per_split(self, c: int) -> int:
        mf = self.max_features
        if mf is None:
            return c
        if mf == "sqrt":
            return max(1, math.ceil(math.sqrt(c)))
        return max(1, min(int(mf), c))

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        y = _check_binary(y)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(check_seed(self.random_state))
        m = self._n_features_per_split(X.shape[1])
        # flat arrays: feature (-1 for leaves), threshold, left, right, proba1
        feat, thr, left, right, p1 = [], [], [], [], []

        def grow(idx: np.ndarray, depth: int) -> int:
            node = len(feat)
            ys = y[idx]
            frac = float(ys.mean())
            feat.append(_LEAF)
            thr.append(0.0)
            left.append(_LEAF)
            right.append(_LEAF)
            p1.append(frac)
            if frac in (0.0, 1.0) or len(idx) < self.min_samples_split:
                return node
            if self.max_depth is not None and depth >= self.max_depth:
                return node
            if m < X.shape[1]:
                features = rng.choice(X.shape[1], size=m, replace=False)
            else:
                features = np.arange(X.shape[1])
            split = best_split(X[idx], ys, features)
            if split is None:
                return node
            j, t, _ = split
            go_left = X[idx, j] <= t
            feat[node], thr[node] = j, t
            left[node] = grow(idx[go_left], depth + 1)
            right[node] = grow(idx[~go_left], depth + 1)
            return node

        grow(np.arange(len(y)), 0)
        self.feature_ = np.array(feat, dtype=int)
        self.threshold_ = np.array(thr, dtype=float)
        self.left_ = np.array(left, dtype=int)
        self.right_ = np.array(right, dtype=int)
        self.value_ = np.array(p1, dtype=float)
        return self

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        check_is_fitted(self, "feature_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        node = np.zeros(len(X), dtype=int)
        active = self.feature_[node] != _LEAF
        while active.any():
            i = np.flatnonzero(active)
            cur = node[i]
            go_left = X[i, self.feature_[cur]] <= self.threshold_[cur]
            node[i] = np.where(go_left, self.left_[cur], self.right_[cur])
            active = self.feature_[node] != _LEAF
        return node

    def predict_proba(self, X) -> np.ndarray:
        p = self.value_[self.apply(X)]
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return _threshold(self.predict_proba(X)[:, 1])

    @property
    def tree_(self) -> TreeNode:
        """The fitted tree as nested ``TreeNode`` objects."""
        check_is_fitted(self, "feature_")

        def build(i: int) -> TreeNode:
            proba = (1.0 - self.value_[i], float(self.value_[i]))
            if self.feature_[i] == _LEAF:
                return TreeNode(proba)
            return TreeNode(proba, int(self.feature_[i]), float(self.threshold_[i]),
                            build(self.left_[i]), build(self.right_[i]))

        return build(0)


def train_tree(X, y, max_depth=None, min_samples_split=2, max_features=None, seed=0) -> TreeNode:
    if len(X) == 0:
        raise ValueError("cannot train a tree on empty input")
    return DecisionTree(max_depth, min_samples_split, max_features, seed).fit(X, y).tree_


def tree_proba(node: TreeNode, row) -> float:
    while not node.is_leaf:
        node = node.left if row[node.feature] <= node.threshold else node.right
    return node.proba[1]


# --------------------------------------------------------------------------
# random forest


class RandomForest(BaseEstimator, ClassifierMixin):
    """Bagged CART ensemble; the class-1 probability is the mean over trees.

    Tree ``i`` gets its own stream derived from ``(random_state, i)``, which
    drives both its bootstrap resample and its per-split feature draws.
    """

    def __init__(self, n_trees=100, max_depth=None, min_samples_split=2, max_features="sqrt",
                 bootstrap=True, random_state=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        y = _check_binary(y)
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        seed = check_seed(self.random_state)
        self.estimators_ = []
        for i in range(self.n_trees):
            tree_seed = derive_seed(seed, i)
            if self.bootstrap:
                rows = np.random.default_rng(derive_seed(tree_seed, 0)).integers(0, len(y), size=len(y))
            else:
                rows = np.arange(len(y))
            tree = DecisionTree(self.max_depth, self.min_samples_split, self.max_features, derive_seed(tree_seed, 1))
            self.estimators_.append(tree.fit(X[rows], y[rows]))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "estimators_")
        X = check_array(X, dtype=float)
        p = np.mean([t.predict_proba(X)[:, 1] for t in self.estimators_], axis=0)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return _threshold(self.predict_proba(X)[:, 1])


# --------------------------------------------------------------------------
# k-nearest neighbors


class KNearestNeighbors(BaseEstimator, ClassifierMixin):
    """Euclidean kNN; the class-1 probability is the positive share among the
    ``k`` nearest training rows, distance ties going to the lower row index.

    When fewer than ``k`` training rows are available the whole training set
    votes.
    """

    def __init__(self, k=5):
        self.k = k

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        self.classes_ = np.array([0, 1])
        self.X_ = X
        self.y_ = _check_binary(y)
        self.n_features_in_ = X.shape[1]
        self.n_neighbors_ = min(int(self.k), len(y))
        return self

    def kneighbors(self, X) -> np.ndarray:
        check_is_fitted(self, "X_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        d2 = ((X[:, None, :] - self.X_[None, :, :]) ** 2).sum(axis=2)
        return np.argsort(d2, axis=1, kind="stable")[:, : self.n_neighbors_]

    def predict_proba(self, X) -> np.ndarray:
        p = self.y_[self.kneighbors(X)].mean(axis=1)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return _threshold(self.predict_proba(X)[:, 1])


# --------------------------------------------------------------------------
# soft voting


class SoftVotingEnsemble(BaseEstimator, ClassifierMixin):
    """Weighted mean of member class-1 probabilities.

    ``estimators`` is a list of ``(name, estimator)`` pairs; ``weights``
    defaults to equal weights and must be nonnegative and sum to 1.
    """

    def __init__(self, estimators, weights=None):
        self.estimators = estimators
        self.weights = weights

    def _weights(self) -> np.ndarray:
        n = len(self.estimators)
        w = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if len(w) != n or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be {n} nonnegative values summing to 1, got {list(w)}")
        return w

    def fit(self, X, y):
        from sklearn.base import clone

        X, y = check_X_y(X, y, dtype=float)
        self._weights()
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.estimators_ = [clone(est).fit(X, y) for _, est in self.estimators]
        return self

    @classmethod
    def from_fitted(cls, members, weights=None) -> "SoftVotingEnsemble":
        dims = {m.n_features_in_ for _, m in members}
        if len(dims) != 1:
            raise ValueError(f"members disagree on feature dimension: {sorted(dims)}")
        ens = cls(members, weights)
        ens._weights()
        ens.classes_ = np.array([0, 1])
        ens.n_features_in_ = dims.pop()
        ens.estimators_ = [m for _, m in members]
        return ens

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "estimators_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        w = self._weights()
        p = sum(wi * m.predict_proba(X)[:, 1] for wi, m in zip(w, self.estimators_))
        p = np.clip(p, 0.0, 1.0)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return _threshold(self.predict_proba(X)[:, 1])


# --------------------------------------------------------------------------
# k-means


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (points ** 2).sum(axis=1)[:, None] - 2.0 * points @ centroids.T + (centroids ** 2).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def _inertia(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [int(rng.integers(n))]
    d2 = ((points - points[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point already coincides with a center; take unused rows in order
            rest = [i for i in range(n) if i not in set(centers)]
            nxt = rest[0]
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[centers].copy()


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    inertia_history: list[float]
    n_iter: int


def _lloyd(points, k, rng, max_iter, tol, refine) -> KMeansResult:
    centroids = _kmeans_pp(points, k, rng)
    history: list[float] = []
    labels = np.zeros(len(points), dtype=int)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(points, centroids)
        labels = np.argmin(d2, axis=1)
        history.append(_inertia(points, centroids, labels))
        new = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                # re-seed at the point farthest from its nearest centroid
                far = int(np.argmax(_sq_dists(points, new).min(axis=1)))
                new[j] = points[far]
                labels[far] = j
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(points, centroids)
    labels = np.argmin(d2, axis=1)
    for j in range(k):
        if (labels == j).any():
            centroids[j] = points[labels == j].mean(axis=0)
    history.append(_inertia(points, centroids, labels))
    if refine:
        centroids, labels = _hartigan(points, centroids, labels, history)
    inertia = history[-1]
    for a, b in zip(history, history[1:]):
        if b > a + 1e-9 * max(1.0, a):
            raise AssertionError(f"k-means inertia increased: {a} -> {b}")
    return KMeansResult(centroids, labels, inertia, history, n_iter)


def _hartigan(points, centroids, labels, history):
    """Single-point moves that lower the within-cluster sum of squares.

    Moving x from cluster a (size n_a > 1) to b changes the cost by
    n_b/(n_b+1)*|x-c_b|^2 - n_a/(n_a-1)*|x-c_a|^2; the most negative move is
    applied until none is left. Lloyd fixed points are not always stable
    under these moves, so this escapes some of Lloyd's local optima.
    """
    k = len(centroids)
    sizes = np.bincount(labels, minlength=k).astype(float)
    rows = np.arange(len(points))
    while True:
        d2 = _sq_dists(points, centroids)
        own = sizes[labels]
        with np.errstate(divide="ignore", invalid="ignore"):
            remove = np.where(own > 1, own / (own - 1) * d2[rows, labels], -np.inf)
        add = sizes / (sizes + 1) * d2
        add[rows, labels] = np.inf
        delta = add - remove[:, None]
        i, b = np.unravel_index(int(np.argmin(delta)), delta.shape)
        current = history[-1]
        if not delta[i, b] < -1e-12 * max(1.0, current):
            return centroids, labels
        a = labels[i]
        labels = labels.copy()
        labels[i] = b
        sizes[a] -= 1
        sizes[b] += 1
        for j in (a, b):
            centroids[j] = points[labels == j].mean(axis=0)
        new = _inertia(points, centroids, labels)
        if new >= current:
            # rounding ate the gain; keep the previous partition
            labels[i] = a
            sizes[a] += 1
            sizes[b] -= 1
            for j in (a, b):
                centroids[j] = points[labels == j].mean(axis=0)
            return centroids, labels
        history.append(new)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6, n_init: int = 10,
           refine: bool = True) -> KMeansResult:
    """k-means++ seeding, Lloyd iterations, then Hartigan single-point moves.

    Runs ``n_init`` independent restarts (streams derived from ``seed``) and
    keeps the lowest final inertia, earliest restart winning ties. Inertia is
    checked to be non-increasing at every iteration. ``refine=False`` skips
    the Hartigan pass, which costs a full distance update per move.
    """
    points = check_array(points, dtype=float)
    if not 1 <= k <= len(points):
        raise ValueError(f"k must be in [1, {len(points)}], got {k}")
    best = None
    for r in range(max(1, n_init)):
        res = _lloyd(points, k, np.random.default_rng(derive_seed(seed, r)), max_iter, tol, refine)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


class KMeans(BaseEstimator, ClusterMixin):
    def __init__(self, n_clusters=8, max_iter=300, tol=1e-6, n_init=10, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        res = kmeans(X, self.n_clusters, self.random_state, self.max_iter, self.tol, self.n_init)
        self.cluster_centers_ = res.centroids
        self.labels_ = res.labels
        self.inertia_ = res.inertia
        self.inertia_history_ = res.inertia_history
        self.n_iter_ = res.n_iter
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "cluster_centers_")
        return np.argmin(_sq_dists(check_array(X, dtype=float), self.cluster_centers_), axis=1)
