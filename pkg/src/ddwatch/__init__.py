"""Digital dermatitis detection and forecasting from dairy-cow behavior sensors."""

from .automl import GaConfig, GrammarBounds, PipelineSpec, evaluate_pipeline, ga_search, grid_refine
from .evaluate import (
    DetectionConfig,
    Herd,
    SweepConfig,
    channel_importance,
    detection_matrix,
    lower_bound_95,
    run_detection,
    run_sweep,
)
from .featurize import (
    LagWindowConfig,
    MinMaxScaler,
    PolynomialExpander,
    detection_features,
    kmeans_undersample,
    lagwindow_features,
    pearson_matrix,
)
from .herd_data import FeatureMatrix, GroupedKFold, derive_episodes, grouped_kfold, grouped_split, match_controls
from .learners import DecisionTree, KMeans, KNearestNeighbors, RandomForest, SoftVotingEnsemble, kmeans
from .synthherd import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "DecisionTree", "DetectionConfig", "FeatureMatrix", "GaConfig", "GrammarBounds", "GroupedKFold", "Herd",
    "KMeans", "KNearestNeighbors", "LagWindowConfig", "MinMaxScaler", "PipelineSpec", "PolynomialExpander",
    "RandomForest", "SoftVotingEnsemble", "SweepConfig", "SynthConfig", "channel_importance", "derive_episodes",
    "detection_features", "detection_matrix", "evaluate_pipeline", "ga_search", "generate", "grid_refine",
    "grouped_kfold", "grouped_split", "kmeans", "kmeans_undersample", "lagwindow_features", "lower_bound_95",
    "match_controls", "pearson_matrix", "run_detection", "run_sweep",
]
