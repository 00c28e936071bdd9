"""Learning-curve datasets: data model, CSV/JSON ingestion, normalization and splits.

CSV layout, one row per (curve, epoch)::

    id,epoch,value,h_0,...,h_{D-1}

The hyperparameter columns repeat on every row of a curve and must agree.
Columns after ``value`` are taken as the configuration names, so datasets
whose names are not ``h_i`` still round-trip. The dataset name is not stored
in CSV; it is taken from the file stem on load.

JSON layout::

    {"name": str, "config_names": [str], "curves": [{"id": str, "config": [num], "values": [num]}]}
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed or inconsistent learning-curve data."""


def _frozen_array(values, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"non-finite value in {what}")
    arr.setflags(write=False)
    return arr


def format_float(x: float) -> str:
    """Shortest decimal text that parses back to the same double."""
    return repr(float(x))


@dataclass(frozen=True, eq=False)
class HyperparameterConfig:
    values: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        values = _frozen_array(self.values, "config")
        object.__setattr__(self, "values", values)
        names = tuple(self.names) if self.names else default_names(values.size)
        if len(names) != values.size:
            raise DatasetError(
                f"config has {values.size} values but {len(names)} names"
            )
        object.__setattr__(self, "names", names)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, HyperparameterConfig):
            return NotImplemented
        return self.names == other.names and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.names, self.values.tobytes()))


@dataclass(frozen=True, eq=False)
class LearningCurve:
    config: HyperparameterConfig
    values: np.ndarray
    id: str

    def __post_init__(self):
        values = _frozen_array(self.values, f"curve {self.id!r}")
        if values.size < 1:
            raise DatasetError(f"curve {self.id!r} is empty")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "id", str(self.id))

    def __len__(self):
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, LearningCurve):
            return NotImplemented
        return (
            self.id == other.id
            and self.config == other.config
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.id, self.values.tobytes()))


@dataclass(frozen=True, eq=False)
class CurveDataset:
    curves: tuple[LearningCurve, ...]
    name: str
    config_dim: int
    config_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        curves = tuple(self.curves)
        object.__setattr__(self, "curves", curves)
        if self.config_dim < 1:
            raise DatasetError("config_dim must be positive")
        names = tuple(self.config_names) if self.config_names else None
        if names is None:
            names = curves[0].config.names if curves else default_names(self.config_dim)
        if len(names) != self.config_dim:
            raise DatasetError("config_names length differs from config_dim")
        object.__setattr__(self, "config_names", names)
        seen = set()
        for c in curves:
            if c.config.dim != self.config_dim:
                raise DatasetError(
                    f"curve {c.id!r} has config dimension {c.config.dim}, "
                    f"expected {self.config_dim}"
                )
            if c.id in seen:
                raise DatasetError(f"duplicate curve id {c.id!r}")
            seen.add(c.id)

    def __len__(self):
        return len(self.curves)

    def __iter__(self):
        return iter(self.curves)

    def __eq__(self, other):
        if not isinstance(other, CurveDataset):
            return NotImplemented
        return (
            self.name == other.name
            and self.config_dim == other.config_dim
            and self.config_names == other.config_names
            and self.curves == other.curves
        )

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.curves]

    def get(self, curve_id: str) -> LearningCurve:
        for c in self.curves:
            if c.id == curve_id:
                return c
        raise KeyError(curve_id)

    def replace_curves(self, curves: Sequence[LearningCurve], name: str | None = None):
        return CurveDataset(
            curves=tuple(curves),
            name=self.name if name is None else name,
            config_dim=self.config_dim,
            config_names=self.config_names,
        )


def default_names(dim: int) -> tuple[str, ...]:
    return tuple(f"h_{i}" for i in range(dim))


def make_curve(curve_id: str, config, values, names: Sequence[str] = ()) -> LearningCurve:
    return LearningCurve(HyperparameterConfig(config, tuple(names)), values, curve_id)


# ---------------------------------------------------------------------------
# Serialization


def save_dataset(dataset: CurveDataset, path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        _save_csv(dataset, path)
    elif format == "json":
        _save_json(dataset, path)
    else:
        raise ValueError(f"unknown format {format!r}")


def _save_csv(dataset: CurveDataset, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "epoch", "value", *dataset.config_names])
        for curve in dataset.curves:
            cfg = [format_float(v) for v in curve.config.values]
            for t, y in enumerate(curve.values, start=1):
                writer.writerow([curve.id, t, format_float(y), *cfg])


def _save_json(dataset: CurveDataset, path: Path) -> None:
    doc = {
        "name": dataset.name,
        "config_names": list(dataset.config_names),
        "curves": [
            {
                "id": c.id,
                "config": [float(v) for v in c.config.values],
                "values": [float(v) for v in c.values],
            }
            for c in dataset.curves
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_dataset(path, format: str | None = None) -> CurveDataset:
    """Read a dataset; ``format`` defaults to the file suffix."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    if format == "csv":
        return _load_csv(path)
    if format == "json":
        return _load_json(path)
    raise ValueError(f"unknown format {format!r}")


def _parse_float(text: str, where: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise DatasetError(f"{where}: cannot parse {text!r} as a number") from None
    if not math.isfinite(x):
        raise DatasetError(f"{where}: non-finite value {text!r}")
    return x


def _load_csv(path: Path) -> CurveDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, expected a header") from None
        if header[:3] != ["id", "epoch", "value"]:
            raise DatasetError(f"{path}:1: header must start with id,epoch,value")
        names = tuple(header[3:])
        dim = len(names)
        if dim < 1:
            raise DatasetError(f"{path}:1: no hyperparameter columns")

        # id -> list of (epoch, value, config, line)
        rows: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}:{lineno}"
            if len(row) != 3 + dim:
                raise DatasetError(
                    f"{where}: malformed row, expected {3 + dim} fields, got {len(row)}"
                )
            try:
                epoch = int(row[1])
            except ValueError:
                raise DatasetError(f"{where}: malformed epoch {row[1]!r}") from None
            value = _parse_float(row[2], where)
            cfg = tuple(_parse_float(v, where) for v in row[3:])
            rows.setdefault(row[0], []).append((epoch, value, cfg, lineno))

    curves = []
    for cid, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        epochs = [e[0] for e in entries]
        if epochs != list(range(1, len(epochs) + 1)):
            raise DatasetError(
                f"{path}:{entries[0][3]}: non-contiguous epochs for curve {cid!r}: "
                f"{epochs[:10]}"
            )
        cfg = entries[0][2]
        for e in entries[1:]:
            if e[2] != cfg:
                raise DatasetError(
                    f"{path}:{e[3]}: hyperparameters differ within curve {cid!r}"
                )
        curves.append(make_curve(cid, cfg, [e[1] for e in entries], names))
    return CurveDataset(tuple(curves), path.stem, dim, names)


def _load_json(path: Path) -> CurveDataset:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{exc.lineno}: malformed JSON: {exc.msg}") from None
    try:
        names = tuple(str(n) for n in doc["config_names"])
        name = str(doc["name"])
        raw_curves = doc["curves"]
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: missing field {exc}") from None
    curves = []
    for i, c in enumerate(raw_curves):
        where = f"{path}: curves[{i}]"
        try:
            cid, cfg, values = c["id"], c["config"], c["values"]
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{where}: missing field {exc}") from None
        if len(cfg) != len(names):
            raise DatasetError(
                f"{where}: config dimension {len(cfg)} differs from {len(names)}"
            )
        try:
            curves.append(make_curve(str(cid), cfg, values, names))
        except (DatasetError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: {exc}") from None
    return CurveDataset(tuple(curves), name, len(names), names)


# ---------------------------------------------------------------------------
# Splitting


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie strictly between 0 and 1")


def split(dataset: CurveDataset, spec: SplitSpec) -> tuple[CurveDataset, CurveDataset]:
    """Partition whole curves into (train, test); both keep the original order."""
    n = len(dataset)
    if n < 2:
        raise DatasetError("need at least 2 curves to split")
    n_test = int(math.floor(spec.test_fraction * n + 0.5))
    if n_test < 1 or n_test > n - 1:
        raise DatasetError(
            f"test_fraction={spec.test_fraction} on {n} curves leaves an empty side"
        )
    perm = np.random.default_rng(spec.seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [c for i, c in enumerate(dataset.curves) if i not in test_idx]
    test = [c for i, c in enumerate(dataset.curves) if i in test_idx]
    return (
        dataset.replace_curves(train, f"{dataset.name}-train"),
        dataset.replace_curves(test, f"{dataset.name}-test"),
    )


# ---------------------------------------------------------------------------
# Normalization


@dataclass(frozen=True)
class NormalizationRecord:
    scheme: str
    min: float = 0.0
    max: float = 1.0

    @property
    def scale(self) -> float:
        return self.max - self.min if self.scheme == "minmax_per_dataset" else 1.0

    def forward(self, values):
        if self.scheme == "none":
            return values
        return (np.asarray(values, dtype=np.float64) - self.min) / self.scale

    def inverse(self, values):
        if self.scheme == "none":
            return values
        return np.asarray(values, dtype=np.float64) * self.scale + self.min

    def inverse_variance(self, variances):
        if self.scheme == "none":
            return variances
        return np.asarray(variances, dtype=np.float64) * self.scale**2

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "min": self.min, "max": self.max}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationRecord":
        return cls(d["scheme"], float(d["min"]), float(d["max"]))


def normalize(dataset: CurveDataset, scheme: str = "none"):
    if len(dataset) == 0:
        raise DatasetError("cannot normalize an empty dataset")
    if scheme == "none":
        return dataset, NormalizationRecord("none")
    if scheme != "minmax_per_dataset":
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    lo = min(float(c.values.min()) for c in dataset.curves)
    hi = max(float(c.values.max()) for c in dataset.curves)
    if hi == lo:
        raise DatasetError("degenerate dataset: max == min, cannot min-max normalize")
    record = NormalizationRecord(scheme, lo, hi)
    return apply_normalization(dataset, record), record


def apply_normalization(dataset: CurveDataset, record: NormalizationRecord) -> CurveDataset:
    if record.scheme == "none":
        return dataset
    return dataset.replace_curves(
        [LearningCurve(c.config, record.forward(c.values), c.id) for c in dataset.curves]
    )


def denormalize(dataset: CurveDataset, record: NormalizationRecord) -> CurveDataset:
    if record.scheme == "none":
        return dataset
    return dataset.replace_curves(
        [LearningCurve(c.config, record.inverse(c.values), c.id) for c in dataset.curves]
    )
