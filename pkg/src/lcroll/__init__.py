"""Probabilistic learning-curve extrapolation with forest and recurrent rollouts."""

from lcroll.curve_data import (
    CurveDataset,
    DatasetError,
    HyperparameterConfig,
    LearningCurve,
    NormalizationRecord,
    SplitSpec,
    denormalize,
    load_dataset,
    normalize,
    save_dataset,
    split,
)
from lcroll.forest import (
    ForestTrainConfig,
    PredictiveGaussian,
    RegressionForest,
    fit_forest,
    forest_predict,
    sample_prediction,
)
from lcroll.rollout import (
    RolloutConfig,
    RolloutResult,
    make_training_windows,
    roll_out,
    vrnn_predictor,
    windowed_forest_predictor,
)

__version__ = "0.1.0"

__all__ = [
    "CurveDataset",
    "DatasetError",
    "ForestTrainConfig",
    "HyperparameterConfig",
    "LearningCurve",
    "NormalizationRecord",
    "PredictiveGaussian",
    "RegressionForest",
    "RolloutConfig",
    "RolloutResult",
    "SplitSpec",
    "denormalize",
    "fit_forest",
    "forest_predict",
    "load_dataset",
    "make_training_windows",
    "normalize",
    "roll_out",
    "sample_prediction",
    "save_dataset",
    "split",
    "vrnn_predictor",
    "windowed_forest_predictor",
]
