"""Versioned JSON documents for fitted models and pipelines.

Floats are written with ``repr`` precision by the json module, so a
round-trip reproduces predictions exactly.
"""

from __future__ import annotations

import json

import numpy as np
from sklearn.pipeline import Pipeline

from .featurize import MinMaxParams, MinMaxScaler, PolynomialExpander
from .learners import DecisionTree, KNearestNeighbors, RandomForest, SoftVotingEnsemble

FORMAT = "ddwatch.model"
VERSION = 1


def _tree(t: DecisionTree) -> dict:
    return {
        "kind": "tree",
        "params": t.get_params(),
        "n_features": int(t.n_features_in_),
        "feature": t.feature_.tolist(),
        "threshold": t.threshold_.tolist(),
        "left": t.left_.tolist(),
        "right": t.right_.tolist(),
        "value": t.value_.tolist(),
    }


def _load_tree(d: dict) -> DecisionTree:
    t = DecisionTree(**d["params"])
    t.classes_ = np.array([0, 1])
    t.n_features_in_ = d["n_features"]
    t.feature_ = np.array(d["feature"], dtype=int)
    t.threshold_ = np.array(d["threshold"], dtype=float)
    t.left_ = np.array(d["left"], dtype=int)
    t.right_ = np.array(d["right"], dtype=int)
    t.value_ = np.array(d["value"], dtype=float)
    return t


def to_document(model) -> dict:
    if isinstance(model, Pipeline):
        return {"kind": "pipeline", "steps": [[name, to_document(step)] for name, step in model.steps]}
    if isinstance(model, DecisionTree):
        return _tree(model)
    if isinstance(model, RandomForest):
        params = model.get_params()
        return {
            "kind": "forest",
            "params": params,
            "n_features": int(model.n_features_in_),
            "trees": [_tree(t) for t in model.estimators_],
        }
    if isinstance(model, KNearestNeighbors):
        return {"kind": "knn", "k": int(model.k), "X": model.X_.tolist(), "y": model.y_.tolist()}
    if isinstance(model, SoftVotingEnsemble):
        return {
            "kind": "ensemble",
            "weights": [float(w) for w in model._weights()],
            "members": [[name, to_document(m)] for (name, _), m in zip(model.estimators, model.estimators_)],
        }
    if isinstance(model, MinMaxScaler):
        p = model.params_
        return {"kind": "minmax", "minimum": p.minimum.tolist(), "maximum": p.maximum.tolist()}
    if isinstance(model, PolynomialExpander):
        return {"kind": "poly2", "n_features": int(model.n_features_in_)}
    raise TypeError(f"cannot serialize {type(model).__name__}")


def from_document(d: dict):
    kind = d["kind"]
    if kind == "pipeline":
        return Pipeline([(name, from_document(step)) for name, step in d["steps"]])
    if kind == "tree":
        return _load_tree(d)
    if kind == "forest":
        f = RandomForest(**d["params"])
        f.classes_ = np.array([0, 1])
        f.n_features_in_ = d["n_features"]
        f.estimators_ = [_load_tree(t) for t in d["trees"]]
        return f
    if kind == "knn":
        return KNearestNeighbors(d["k"]).fit(np.array(d["X"], dtype=float), np.array(d["y"], dtype=int))
    if kind == "ensemble":
        members = [(name, from_document(m)) for name, m in d["members"]]
        return SoftVotingEnsemble.from_fitted(members, d["weights"])
    if kind == "minmax":
        s = MinMaxScaler()
        s.params_ = MinMaxParams(np.array(d["minimum"], dtype=float), np.array(d["maximum"], dtype=float))
        s.n_features_in_ = len(d["minimum"])
        return s
    if kind == "poly2":
        e = PolynomialExpander()
        e.n_features_in_ = d["n_features"]
        return e
    raise ValueError(f"unknown model kind {kind!r}")


def dumps(model) -> str:
    return json.dumps({"format": FORMAT, "version": VERSION, "model": to_document(model)})


def loads(text: str):
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise ValueError("not a ddwatch model document")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported model document version {doc.get('version')}")
    return from_document(doc["model"])
