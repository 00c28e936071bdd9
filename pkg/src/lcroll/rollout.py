"""Autoregressive rollouts that extend a partial learning curve to a horizon.

Each of the R trajectories owns a random stream derived from
``(seed, trajectory index)``, and consumes it in step order. Trajectories
are advanced together as a batch for speed, which gives the same numbers as
running them one at a time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lcroll.curve_data import CurveDataset, HyperparameterConfig, format_float
from lcroll.forest import RegressionForest
from lcroll.vrnn import (
    DropoutMasks,
    RecurrentState,
    VrnnModel,
    config_embeddings,
    sample_masks,
    step_batch,
)


@dataclass(frozen=True)
class RolloutConfig:
    num_rollouts: int = 100
    horizon: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.num_rollouts < 1:
            raise ValueError("num_rollouts must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True, eq=False)
class RolloutResult:
    trajectories: np.ndarray  # (R, T - M)
    mean: np.ndarray
    variance: np.ndarray
    first_epoch: int  # epoch of column 0, i.e. M + 1

    @classmethod
    def from_trajectories(cls, trajectories, first_epoch: int) -> "RolloutResult":
        traj = np.asarray(trajectories, dtype=np.float64)
        mean, variance = aggregate(traj)
        return cls(traj, mean, variance, first_epoch)

    @property
    def epochs(self) -> np.ndarray:
        return np.arange(self.first_epoch, self.first_epoch + self.mean.size)

    def at(self, epoch: int) -> tuple[float, float]:
        j = epoch - self.first_epoch
        if not 0 <= j < self.mean.size:
            raise IndexError(f"epoch {epoch} outside the rolled-out range")
        return float(self.mean[j]), float(self.variance[j])

    def write_csv(self, path, trajectories_path=None) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean", "variance"])
            for t, mu, var in zip(self.epochs, self.mean, self.variance):
                w.writerow([int(t), format_float(mu), format_float(var)])
        if trajectories_path is not None:
            with open(Path(trajectories_path), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch", "rollout_idx", "value"])
                for j, t in enumerate(self.epochs):
                    for r in range(self.trajectories.shape[0]):
                        w.writerow([int(t), r, format_float(self.trajectories[r, j])])


def aggregate(trajectories: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-step mean and population (1/R) variance over trajectory rows."""
    mean = trajectories.mean(axis=0)
    # identical rows: report that value exactly rather than a rounded average
    mean = np.where(np.all(trajectories == trajectories[:1], axis=0), trajectories[0], mean)
    variance = ((trajectories - mean) ** 2).mean(axis=0)
    return mean, variance


class OneStepPredictor:
    """Interface for rollout-capable models.

    ``start`` primes a batch of trajectories with the observed prefix and
    returns a context; ``step`` returns the next sampled value for every
    trajectory and advances the context. ``streams[r]`` is the random
    generator of trajectory r.
    """

    window: int = 1
    min_observed: int = 0

    def start(self, config: HyperparameterConfig, observed: np.ndarray, streams):
        raise NotImplementedError

    def step(self, context) -> np.ndarray:
        raise NotImplementedError


class WindowedForestPredictor(OneStepPredictor):
    """Forest over ``[theta, y_{t-K}, ..., y_{t-1}]`` sampled from its Gaussian."""

    def __init__(self, forest: RegressionForest, window: int, config_dim: int | None = None):
        if window < 1:
            raise ValueError("window must be >= 1")
        if config_dim is not None and forest.feature_dim != config_dim + window:
            raise ValueError(
                f"forest expects {forest.feature_dim} features, "
                f"config_dim + window = {config_dim + window}"
            )
        if forest.feature_dim <= window:
            raise ValueError("forest has no room for configuration features")
        self.forest = forest
        self.window = window
        self.min_observed = window

    def start(self, config, observed, streams):
        theta = np.asarray(config.values, dtype=np.float64)
        if theta.size + self.window != self.forest.feature_dim:
            raise ValueError("configuration dimension does not match the forest")
        R = len(streams)
        X = np.empty((R, self.forest.feature_dim))
        X[:, : theta.size] = theta
        X[:, theta.size:] = observed[-self.window:]
        return {"X": X, "split": theta.size, "streams": streams}

    def step(self, ctx):
        X = ctx["X"]
        mean, var = self.forest.predict_many(X)
        z = np.array([g.standard_normal() for g in ctx["streams"]])
        sample = np.where(var > 0.0, mean + np.sqrt(np.maximum(var, 0.0)) * z, mean)
        # FIFO window: drop the oldest value, append the sample
        X[:, ctx["split"]:-1] = X[:, ctx["split"] + 1:]
        X[:, -1] = sample
        return sample


class VrnnPredictor(OneStepPredictor):
    """MC-dropout rollouts: one mask pair per trajectory, deterministic steps."""

    window = 1
    min_observed = 0

    def __init__(self, model: VrnnModel, y0: float = 0.0):
        self.model = model
        self.y0 = y0

    def start(self, config, observed, streams):
        model = self.model
        R = len(streams)
        masks = [sample_masks(model, g) for g in streams]
        z1 = np.stack([m.z1 for m in masks])
        z2 = np.stack([m.z2 for m in masks])
        X = np.broadcast_to(np.asarray(config.values, dtype=np.float64), (R, model.config_dim))
        e1, e2 = config_embeddings(model, X, DropoutMasks(z1, z2))
        state = RecurrentState.zeros(model, R)
        prev = np.full(R, self.y0)
        for y in observed:
            _, state = step_batch(model, e1, e2, prev, state)
            prev = np.full(R, float(y))
        return {"e1": e1, "e2": e2, "state": state, "prev": prev, "masks": (z1, z2)}

    def step(self, ctx):
        y, ctx["state"] = step_batch(self.model, ctx["e1"], ctx["e2"], ctx["prev"], ctx["state"])
        ctx["prev"] = y
        return y


def windowed_forest_predictor(forest: RegressionForest, K: int,
                              config_dim: int | None = None) -> WindowedForestPredictor:
    return WindowedForestPredictor(forest, K, config_dim)


def vrnn_predictor(model: VrnnModel) -> VrnnPredictor:
    return VrnnPredictor(model)


def trajectory_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(np.random.SeedSequence([seed, r])) for r in range(n)]


def roll_out(predictor: OneStepPredictor, config: HyperparameterConfig, observed,
             cfg: RolloutConfig) -> RolloutResult:
    observed = np.asarray(observed, dtype=np.float64).reshape(-1)
    M = observed.size
    if M < predictor.min_observed:
        raise ValueError(
            f"predictor needs at least {predictor.min_observed} observed epochs, got {M}"
        )
    if cfg.horizon <= M:
        raise ValueError(f"horizon {cfg.horizon} must exceed observed length {M}")
    streams = trajectory_streams(cfg.seed, cfg.num_rollouts)
    ctx = predictor.start(config, observed, streams)
    traj = np.empty((cfg.num_rollouts, cfg.horizon - M))
    for j in range(cfg.horizon - M):
        traj[:, j] = predictor.step(ctx)
    return RolloutResult.from_trajectories(traj, M + 1)


def make_training_windows(dataset: CurveDataset, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``[theta, y_{t-K}..y_{t-1}] -> y_t`` for t = K+1..T, curve order then t."""
    if K < 1:
        raise ValueError("window K must be >= 1")
    feats, targets = [], []
    for c in dataset.curves:
        T = len(c)
        if T < K + 1:
            raise ValueError(f"curve {c.id!r} has length {T}, needs at least K+1={K + 1}")
        lags = np.lib.stride_tricks.sliding_window_view(c.values, K)[: T - K]
        rows = np.hstack([np.broadcast_to(c.config.values, (T - K, c.config.dim)), lags])
        feats.append(rows)
        targets.append(c.values[K:])
    if not feats:
        return np.zeros((0, dataset.config_dim + K)), np.zeros(0)
    return np.vstack(feats), np.concatenate(targets)
