from datetime import date, timedelta

import numpy as np
import pytest

from ddwatch.evaluate import Herd
from ddwatch.herd_data import BehaviorDay, CowProfile, FeatureMatrix, LesionObservation
from ddwatch.synthherd import SynthConfig, build

D0 = date(2023, 1, 1)


def day(i: int) -> date:
    return D0 + timedelta(days=i)


def behavior_rows(cow, days, value=0.2):
    return [BehaviorDay(cow, day(i), 0.4, value, 0.05, 0.2, 0.15, 38.6) for i in days]


def lesion_rows(cow, statuses: dict):
    return [LesionObservation(cow, day(i), s, "none" if s == "none" else "small") for i, s in sorted(statuses.items())]


def random_matrix(rng, n_groups, rows_per_group=(1, 4), n_features=3) -> FeatureMatrix:
    groups, labels = [], []
    for g in range(n_groups):
        for _ in range(int(rng.integers(rows_per_group[0], rows_per_group[1] + 1))):
            groups.append(f"g{g:03d}")
            labels.append(int(rng.integers(2)))
    X = rng.normal(size=(len(groups), n_features))
    return FeatureMatrix([f"f{j}" for j in range(n_features)], X, labels, groups)


@pytest.fixture(scope="session")
def strong_herd():
    sh = build(SynthConfig(shifts={"active": -15.0}, seed=3))
    return Herd(sh.behavior, sh.lesions, sh.profiles)


@pytest.fixture(scope="session")
def null_herd():
    sh = build(SynthConfig(shifts={}, seed=5))
    return Herd(sh.behavior, sh.lesions, sh.profiles)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
