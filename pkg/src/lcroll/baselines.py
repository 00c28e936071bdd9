"""Comparison methods that do not roll out: last seen value and the static forest."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lcroll.curve_data import CurveDataset
from lcroll.forest import ForestTrainConfig, PredictiveGaussian, RegressionForest, fit_forest


def lsv_predict(observed, target_epoch: int) -> float:
    """Last seen value; carries no variance."""
    observed = np.asarray(observed, dtype=np.float64).reshape(-1)
    if observed.size == 0:
        raise ValueError("LSV needs at least one observed value")
    if target_epoch <= observed.size:
        raise ValueError("target epoch must lie after the observed prefix")
    return float(observed[-1])


@dataclass(frozen=True)
class StaticForestModel:
    """Forest over ``[theta, t]``; blind to any observed prefix."""

    forest: RegressionForest
    max_epoch: int

    @property
    def config_dim(self) -> int:
        return self.forest.feature_dim - 1

    def predict_many(self, config_values, epochs) -> tuple[np.ndarray, np.ndarray]:
        epochs = np.asarray(epochs, dtype=np.float64).reshape(-1)
        theta = np.asarray(config_values, dtype=np.float64).reshape(-1)
        if theta.size != self.config_dim:
            raise ValueError(f"config has {theta.size} values, model expects {self.config_dim}")
        X = np.hstack([np.broadcast_to(theta, (epochs.size, theta.size)), epochs[:, None]])
        return self.forest.predict_many(X)


def static_rows(dataset: CurveDataset) -> tuple[np.ndarray, np.ndarray]:
    rows, targets = [], []
    for c in dataset.curves:
        T = len(c)
        t = np.arange(1, T + 1, dtype=np.float64)[:, None]
        rows.append(np.hstack([np.broadcast_to(c.config.values, (T, c.config.dim)), t]))
        targets.append(c.values)
    return np.vstack(rows), np.concatenate(targets)


def fit_static(dataset: CurveDataset, cfg: ForestTrainConfig = ForestTrainConfig()) -> StaticForestModel:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    X, y = static_rows(dataset)
    return StaticForestModel(fit_forest(X, y, cfg), max(len(c) for c in dataset.curves))


def static_predict(model: StaticForestModel, config, target_epoch: int) -> PredictiveGaussian:
    values = getattr(config, "values", config)
    mu, var = model.predict_many(values, [target_epoch])
    return PredictiveGaussian(float(mu[0]), max(float(var[0]), 0.0))
