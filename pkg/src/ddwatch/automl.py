"""Pipeline search: a small grammar of (scaler, expander, classifier)
pipelines, a genetic algorithm over it, and exhaustive grid refinement of
the winner's hyperparameters. Fitness is mean grouped-CV accuracy.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import IO, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.pipeline import Pipeline

from ._seeding import check_seed, derive_seed
from .featurize import MinMaxScaler, PolynomialExpander
from .herd_data import FeatureMatrix, grouped_kfold
from .learners import KNearestNeighbors, RandomForest, SoftVotingEnsemble

GENES = ("scaler", "expander", "classifier", "n_trees", "max_depth", "k", "rf_weight")
HYPERPARAMETERS = ("n_trees", "max_depth", "k", "rf_weight")
_USES = {
    "rf": {"n_trees", "max_depth"},
    "knn": {"k"},
    "ensemble": {"n_trees", "max_depth", "k", "rf_weight"},
}

# hard limits every genome must respect
N_TREES_RANGE = (10, 300)
MAX_DEPTH_RANGE = (2, 16)
K_RANGE = (1, 25)


@dataclass(frozen=True)
class PipelineSpec:
    """One point of the pipeline grammar.

    ``rf_weight`` is the random forest's share of the soft vote when
    ``classifier == "ensemble"`` (the kNN gets ``1 - rf_weight``).
    """

    scaler: str = "minmax"
    expander: str = "poly2"
    classifier: str = "ensemble"
    n_trees: int = 100
    max_depth: int | None = None
    k: int = 5
    rf_weight: float = 0.5

    def __post_init__(self):
        if self.scaler not in ("none", "minmax"):
            raise ValueError(f"unknown scaler {self.scaler!r}")
        if self.expander not in ("none", "poly2"):
            raise ValueError(f"unknown expander {self.expander!r}")
        if self.classifier not in _USES:
            raise ValueError(f"unknown classifier {self.classifier!r}")
        if not N_TREES_RANGE[0] <= self.n_trees <= N_TREES_RANGE[1]:
            raise ValueError(f"n_trees {self.n_trees} outside {N_TREES_RANGE}")
        if self.max_depth is not None and not MAX_DEPTH_RANGE[0] <= self.max_depth <= MAX_DEPTH_RANGE[1]:
            raise ValueError(f"max_depth {self.max_depth} outside {MAX_DEPTH_RANGE} and not None")
        if not K_RANGE[0] <= self.k <= K_RANGE[1]:
            raise ValueError(f"k {self.k} outside {K_RANGE}")
        if not 0.0 <= self.rf_weight <= 1.0:
            raise ValueError(f"rf_weight {self.rf_weight} outside [0, 1]")

    @property
    def stages(self) -> int:
        return (self.scaler != "none") + (self.expander != "none") + 1

    def canonical(self) -> "PipelineSpec":
        """Same pipeline with hyperparameters the classifier ignores reset to defaults."""
        used = _USES[self.classifier]
        default = PipelineSpec()
        return replace(self, **{h: getattr(default, h) for h in HYPERPARAMETERS if h not in used})

    def key(self) -> str:
        return json.dumps(self.canonical().to_dict(), sort_keys=True)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSpec":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})

    def genome(self) -> tuple:
        return tuple(getattr(self, g) for g in GENES)

    def build(self, seed: int = 0) -> Pipeline:
        steps = []
        if self.scaler == "minmax":
            steps.append(("scale", MinMaxScaler()))
        if self.expander == "poly2":
            steps.append(("expand", PolynomialExpander()))
        rf = RandomForest(n_trees=self.n_trees, max_depth=self.max_depth, random_state=seed)
        knn = KNearestNeighbors(k=self.k)
        if self.classifier == "rf":
            clf = rf
        elif self.classifier == "knn":
            clf = knn
        else:
            w = round(float(self.rf_weight), 12)
            clf = SoftVotingEnsemble([("rf", rf), ("knn", knn)], weights=[w, 1.0 - w])
        steps.append(("classify", clf))
        return Pipeline(steps)


def fitness_order(spec: PipelineSpec, mean_accuracy: float) -> tuple:
    """Sort key: higher accuracy, then fewer stages, then the genome text."""
    return (-mean_accuracy, spec.stages, spec.key())


@dataclass(frozen=True)
class GrammarBounds:
    """Admissible values per gene; collapse any tuple to one value to pin it."""

    scaler: tuple = ("none", "minmax")
    expander: tuple = ("none", "poly2")
    classifier: tuple = ("rf", "knn", "ensemble")
    n_trees: tuple = (10, 25, 50, 100, 200, 300)
    max_depth: tuple = (None, 2, 3, 4, 6, 8, 12, 16)
    k: tuple = tuple(range(1, 26))
    rf_weight: tuple = tuple(round(0.1 * i, 1) for i in range(11))

    def __post_init__(self):
        for g in GENES:
            values = getattr(self, g)
            if not values:
                raise ValueError(f"gene {g!r} has no admissible values")
            for v in values:
                # validates each value against the hard limits
                PipelineSpec(**{g: v})

    def sample_gene(self, gene: str, rng: np.random.Generator):
        values = getattr(self, gene)
        return values[int(rng.integers(len(values)))]

    def sample(self, rng: np.random.Generator) -> PipelineSpec:
        return PipelineSpec(**{g: self.sample_gene(g, rng) for g in GENES})

    def contains(self, spec: PipelineSpec) -> bool:
        return all(getattr(spec, g) in getattr(self, g) for g in GENES)


@dataclass(frozen=True)
class GaConfig:
    population: int = 24
    generations: int = 10
    mutation_rate: float = 0.2
    crossover_rate: float = 0.5
    elitism: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if not 0.0 <= self.mutation_rate <= 1.0 or not 0.0 <= self.crossover_rate <= 1.0:
            raise ValueError("mutation and crossover rates must lie in [0, 1]")
        if not 1 <= self.elitism <= self.population:
            raise ValueError("elitism must be between 1 and the population size")
        check_seed(self.seed)


@dataclass(frozen=True)
class CvResult:
    mean_accuracy: float
    fold_accuracies: tuple[float, ...]
    std: float


def evaluate_pipeline(spec: PipelineSpec, matrix: FeatureMatrix, k: int = 5, seed: int = 0) -> CvResult:
    """Grouped k-fold accuracy of ``spec``.

    Folds depend only on ``seed``, so every genome is scored on the same
    partition; model randomness is derived from ``(seed, genome, fold)``.
    Scaler and expander are fitted on each fold's training rows only.
    """
    accs = []
    for f, (train, valid) in enumerate(grouped_kfold(matrix, k, seed)):
        model = spec.build(derive_seed(seed, spec.key(), f)).fit(train.X, train.y)
        accs.append(float(np.mean(model.predict(valid.X) == valid.y)))
    a = np.array(accs)
    return CvResult(float(a.mean()), tuple(accs), float(a.std()))


@dataclass
class SearchResult:
    best: PipelineSpec
    best_fitness: float
    history: list[float]
    log: list[dict] = field(default_factory=list)


def _score_all(specs, matrix, k, seed, n_jobs) -> list[CvResult]:
    if n_jobs == 1 or len(specs) <= 1:
        return [evaluate_pipeline(s, matrix, k, seed) for s in specs]
    return Parallel(n_jobs=n_jobs)(delayed(evaluate_pipeline)(s, matrix, k, seed) for s in specs)


def ga_search(
    matrix: FeatureMatrix,
    bounds: GrammarBounds | None = None,
    config: GaConfig | None = None,
    k: int = 5,
    n_jobs: int = 1,
) -> SearchResult:
    """Genetic search over the pipeline grammar.

    Size-2 tournaments pick parents, one-point crossover mixes genomes,
    each gene mutates independently by resampling within ``bounds``, and the
    ``elitism`` best individuals survive unchanged. ``history`` holds the
    all-time best fitness after each generation (generation 0 included).
    """
    bounds = bounds or GrammarBounds()
    config = config or GaConfig()
    rng = np.random.default_rng(config.seed)
    cache: dict[str, CvResult] = {}
    log: list[dict] = []

    def score(population: list[PipelineSpec], generation: int) -> list[float]:
        fresh, seen = [], set()
        for s in population:
            if not bounds.contains(s):
                raise AssertionError(f"genome outside grammar bounds: {s}")
            if s.key() not in cache and s.key() not in seen:
                seen.add(s.key())
                fresh.append(s)
        for s, res in zip(fresh, _score_all(fresh, matrix, k, config.seed, n_jobs)):
            cache[s.key()] = res
            log.append({
                "genome": s.canonical().to_dict(),
                "mean_accuracy": res.mean_accuracy,
                "fold_accuracies": list(res.fold_accuracies),
                "generation": generation,
            })
        return [cache[s.key()].mean_accuracy for s in population]

    def tournament(pop, fit):
        a, b = rng.integers(len(pop), size=2)
        return pop[a] if fitness_order(pop[a], fit[a]) <= fitness_order(pop[b], fit[b]) else pop[b]

    population = [bounds.sample(rng) for _ in range(config.population)]
    best: tuple | None = None
    history: list[float] = []
    for gen in range(config.generations + 1):
        fit = score(population, gen)
        ranked = sorted(range(len(population)), key=lambda i: fitness_order(population[i], fit[i]))
        top = ranked[0]
        if best is None or fitness_order(population[top], fit[top]) < fitness_order(*best):
            best = (population[top], fit[top])
        history.append(best[1])
        if len(history) > 1 and history[-1] < history[-2]:
            raise AssertionError("best-so-far fitness decreased")
        if gen == config.generations:
            break
        children = [population[i] for i in ranked[: config.elitism]]
        while len(children) < config.population:
            a, b = tournament(population, fit).genome(), tournament(population, fit).genome()
            if rng.random() < config.crossover_rate:
                cut = int(rng.integers(1, len(GENES)))
                genes = list(a[:cut] + b[cut:])
            else:
                genes = list(a)
            for i, g in enumerate(GENES):
                if rng.random() < config.mutation_rate:
                    genes[i] = bounds.sample_gene(g, rng)
            children.append(PipelineSpec(**dict(zip(GENES, genes))))
        population = children
    return SearchResult(best[0], best[1], history, log)


def grid_points(spec: PipelineSpec, grid: dict[str, Sequence]) -> list[PipelineSpec]:
    """Cartesian product of ``grid`` applied to ``spec``.

    Enumeration order: hyperparameters in ``HYPERPARAMETERS`` order, the last
    one varying fastest, values in the order given.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must be non-empty with at least one value per hyperparameter")
    unknown = set(grid) - set(HYPERPARAMETERS)
    if unknown:
        raise ValueError(f"grid may only vary hyperparameters {HYPERPARAMETERS}, got {sorted(unknown)}")
    names = [h for h in HYPERPARAMETERS if h in grid]
    return [replace(spec, **dict(zip(names, combo))) for combo in itertools.product(*(grid[n] for n in names))]


def grid_refine(
    spec: PipelineSpec,
    grid: dict[str, Sequence],
    matrix: FeatureMatrix,
    k: int = 5,
    seed: int = 0,
    history: list | None = None,
) -> PipelineSpec:
    """Exhaustively score every grid point; the first best in enumeration order wins.

    Each evaluated ``(spec, CvResult)`` is appended to ``history`` when given.
    """
    best = None
    for point in grid_points(spec, grid):
        res = evaluate_pipeline(point, matrix, k, seed)
        if history is not None:
            history.append((point, res))
        if best is None or res.mean_accuracy > best[1]:
            best = (point, res.mean_accuracy)
    return best[0]


def write_search_log(log: Sequence[dict], stream: IO[str]) -> None:
    for entry in log:
        stream.write(json.dumps(entry, sort_keys=True) + "\n")
