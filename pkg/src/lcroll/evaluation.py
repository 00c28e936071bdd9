"""Observed-epoch sweeps scored by squared error and Gaussian log-likelihood.

For every method, observed prefix length M and target epoch t > M, each test
curve reveals y_1..y_M and the method predicts y_t. A cell reports the mean
squared error over curves and the median log-likelihood over curves (lower
median for even counts). Summaries average the cells of one (method, M)
over target epochs. LSV has no variance, so its likelihood cells are None.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from lcroll.baselines import StaticForestModel, lsv_predict
from lcroll.curve_data import CurveDataset, LearningCurve, format_float
from lcroll.rollout import OneStepPredictor, RolloutConfig, roll_out

VARIANCE_FLOOR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_density(y, mean, variance, floor: float = VARIANCE_FLOOR):
    var = np.maximum(np.asarray(variance, dtype=np.float64), floor)
    resid = np.asarray(y, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * resid**2 / var


def lower_median(values) -> float:
    s = sorted(float(v) for v in values)
    if not s:
        raise ValueError("median of an empty sequence")
    return s[(len(s) - 1) // 2]


# ---------------------------------------------------------------------------
# methods


class RolloutMethod:
    kind = "rollout"

    def __init__(self, predictor: OneStepPredictor):
        self.predictor = predictor

    def predict(self, curve: LearningCurve, observed: int, targets, num_rollouts: int, seed: int):
        cfg = RolloutConfig(num_rollouts, int(max(targets)), seed)
        result = roll_out(self.predictor, curve.config, curve.values[:observed], cfg)
        j = np.asarray(targets) - result.first_epoch
        return result.mean[j], result.variance[j]


class StaticMethod:
    kind = "static"

    def __init__(self, model: StaticForestModel):
        self.model = model

    def predict(self, curve: LearningCurve, observed: int, targets, num_rollouts: int, seed: int):
        return self.model.predict_many(curve.config.values, targets)


class LsvMethod:
    kind = "lsv"

    def predict(self, curve: LearningCurve, observed: int, targets, num_rollouts: int, seed: int):
        prefix = curve.values[:observed]
        return np.array([lsv_predict(prefix, t) for t in targets]), None


# ---------------------------------------------------------------------------
# protocol and report


@dataclass(frozen=True)
class EvalProtocol:
    observed_epochs: tuple[int, ...] = (4, 8, 16, 32)
    target_epochs: tuple[int, ...] | None = None  # None: every epoch after M up to T
    num_rollouts: int = 100
    seed: int = 0
    value_space: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "observed_epochs", tuple(int(m) for m in self.observed_epochs))
        if not self.observed_epochs or min(self.observed_epochs) < 1:
            raise ValueError("observed epochs must be positive")
        if self.target_epochs is not None:
            targets = tuple(sorted(int(t) for t in self.target_epochs))
            object.__setattr__(self, "target_epochs", targets)
            if not targets:
                raise ValueError("empty target list")
            if max(self.observed_epochs) >= targets[0]:
                raise ValueError("every observed count must precede the first target epoch")
        if self.num_rollouts < 1:
            raise ValueError("num_rollouts must be >= 1")

    def targets_for(self, observed: int, horizon: int) -> list[int]:
        if self.target_epochs is None:
            return list(range(observed + 1, horizon + 1))
        return list(self.target_epochs)


@dataclass
class Cell:
    method: str
    observed: int
    target: int
    mse: float
    median_ll: float | None
    mse_std_over_curves: float
    ll_std_over_curves: float | None
    count: int


@dataclass
class Summary:
    method: str
    observed: int
    avg_mse: float
    avg_median_ll: float | None
    num_targets: int


@dataclass
class Point:
    method: str
    observed: int
    target: int
    curve_id: str
    true: float
    pred_mean: float
    pred_var: float | None
    ll: float | None


@dataclass
class EvalReport:
    cells: list[Cell] = field(default_factory=list)
    summaries: list[Summary] = field(default_factory=list)
    points: list[Point] = field(default_factory=list)
    value_space: str = "raw"
    protocol: dict = field(default_factory=dict)

    def cell(self, method: str, observed: int, target: int) -> Cell:
        for c in self.cells:
            if (c.method, c.observed, c.target) == (method, observed, target):
                return c
        raise KeyError((method, observed, target))

    def summary(self, method: str, observed: int) -> Summary:
        for s in self.summaries:
            if (s.method, s.observed) == (method, observed):
                return s
        raise KeyError((method, observed))

    def to_dict(self) -> dict:
        return {
            "value_space": self.value_space,
            "protocol": self.protocol,
            "summaries": [asdict(s) for s in self.summaries],
            "cells": [asdict(c) for c in self.cells],
            "points": [asdict(p) for p in self.points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            cells=[Cell(**c) for c in d["cells"]],
            summaries=[Summary(**s) for s in d["summaries"]],
            points=[Point(**p) for p in d["points"]],
            value_space=d.get("value_space", "raw"),
            protocol=d.get("protocol", {}),
        )


def cell_seed(seed: int, method: str, observed: int, curve_id: str) -> int:
    """Rollout seed of one (method, M, curve) cell, independent of evaluation order."""
    digest = hashlib.sha256(f"{seed}|{method}|{observed}|{curve_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def summarize(cells: Sequence[Cell]) -> list[Summary]:
    groups: dict[tuple[str, int], list[Cell]] = {}
    for c in cells:
        groups.setdefault((c.method, c.observed), []).append(c)
    out = []
    for (method, m), group in groups.items():
        lls = [c.median_ll for c in group]
        avg_ll = None if any(v is None for v in lls) else float(np.mean(lls))
        out.append(Summary(method, m, float(np.mean([c.mse for c in group])), avg_ll, len(group)))
    return out


def evaluate(methods: Mapping[str, object], test: CurveDataset, protocol: EvalProtocol) -> EvalReport:
    if len(test) == 0:
        raise ValueError("empty test set")
    horizon = min(len(c) for c in test.curves)
    for name, method in methods.items():
        if not hasattr(method, "predict"):
            raise TypeError(f"method {name!r} is not a predictor")

    report = EvalReport(value_space=protocol.value_space, protocol=asdict(protocol))
    for name, method in methods.items():
        for m in protocol.observed_epochs:
            targets = protocol.targets_for(m, horizon)
            if not targets:
                raise ValueError(f"no target epochs after M={m} within curve length {horizon}")
            if max(targets) > horizon:
                raise ValueError(
                    f"target epoch {max(targets)} exceeds the shortest test curve ({horizon})"
                )
            sq = np.empty((len(test), len(targets)))
            ll = np.empty_like(sq)
            has_var = True
            for i, curve in enumerate(test.curves):
                seed = cell_seed(protocol.seed, name, m, curve.id)
                mean, var = method.predict(curve, m, targets, protocol.num_rollouts, seed)
                truth = curve.values[np.asarray(targets) - 1]
                sq[i] = (np.asarray(mean) - truth) ** 2
                if var is None:
                    has_var = False
                else:
                    ll[i] = gaussian_log_density(truth, mean, var)
                for j, t in enumerate(targets):
                    report.points.append(Point(
                        name, m, t, curve.id, float(truth[j]), float(mean[j]),
                        None if var is None else float(var[j]),
                        float(ll[i, j]) if has_var else None,
                    ))
            for j, t in enumerate(targets):
                report.cells.append(Cell(
                    method=name,
                    observed=m,
                    target=t,
                    mse=float(np.mean(sq[:, j])),
                    median_ll=lower_median(ll[:, j]) if has_var else None,
                    mse_std_over_curves=float(np.std(sq[:, j])),
                    ll_std_over_curves=float(np.std(ll[:, j])) if has_var else None,
                    count=len(test),
                ))
    report.summaries = summarize(report.cells)
    return report


def adaptation_curve(name: str, method, test: CurveDataset, target_epoch: int,
                     observed_grid: Sequence[int], num_rollouts: int = 100, seed: int = 0):
    """Series of (M, mse, median_ll) at a single target epoch."""
    if target_epoch <= max(observed_grid):
        raise ValueError("target epoch must exceed every observed count")
    protocol = EvalProtocol(tuple(observed_grid), (target_epoch,), num_rollouts, seed)
    report = evaluate({name: method}, test, protocol)
    return [(m, report.cell(name, m, target_epoch).mse, report.cell(name, m, target_epoch).median_ll)
            for m in protocol.observed_epochs]


# ---------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    return "" if x is None else format_float(x)


def _parse(text: str):
    return None if text == "" else float(text)


METRICS_HEADER = ["method", "observed", "target", "mse", "median_ll",
                  "mse_std_over_curves", "ll_std_over_curves", "count"]
ADAPTATION_HEADER = ["method", "target", "observed", "mse", "median_ll"]
POINTS_HEADER = ["method", "observed", "target", "true", "pred_mean", "pred_var", "ll", "curve_id"]


def emit_plot_data(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics_by_target.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for c in report.cells:
            w.writerow([c.method, c.observed, c.target, _fmt(c.mse), _fmt(c.median_ll),
                        _fmt(c.mse_std_over_curves), _fmt(c.ll_std_over_curves), c.count])
    with open(out / "adaptation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ADAPTATION_HEADER)
        for c in sorted(report.cells, key=lambda c: (c.method, c.target, c.observed)):
            w.writerow([c.method, c.target, c.observed, _fmt(c.mse), _fmt(c.median_ll)])
    with open(out / "predicted_vs_true.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POINTS_HEADER)
        for p in report.points:
            w.writerow([p.method, p.observed, p.target, _fmt(p.true), _fmt(p.pred_mean),
                        _fmt(p.pred_var), _fmt(p.ll), p.curve_id])


def read_metrics_csv(path) -> list[Cell]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        Cell(r["method"], int(r["observed"]), int(r["target"]), float(r["mse"]),
             _parse(r["median_ll"]), float(r["mse_std_over_curves"]),
             _parse(r["ll_std_over_curves"]), int(r["count"]))
        for r in rows
    ]


def write_report_json(report: EvalReport, path) -> None:
    with open(Path(path), "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
