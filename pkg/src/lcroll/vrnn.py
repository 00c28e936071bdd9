"""Configuration-conditioned stacked LSTM with variational dropout.

One step of the model::

    e1 = h1(theta) * z1                 e2 = h2(theta) * z2
    a1 = r1([e1, y_prev])               a2 = r2([e2, a1])
    y_hat = h3(a2)

``z1``/``z2`` are Bernoulli(1 - d) masks drawn once per sequence and held
fixed over time. Masks are applied raw, without 1/(1 - d) rescaling, both in
training and at prediction time. With a single stacked LSTM the second level
is dropped and ``h3`` reads ``a1`` directly.

Everything is plain numpy in float64 with hand-written backpropagation
through time. All batched functions take a leading batch axis.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from lcroll.curve_data import CurveDataset

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    lstm_units: int = 6
    mlp_units: int = 103
    config_mlp_units: int = 115
    num_stacked_lstms: int = 2
    mlp_layers: int = 1
    config_mlp_layers: int = 1

    def __post_init__(self):
        for name in ("lstm_units", "mlp_units", "config_mlp_units"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_stacked_lstms not in (1, 2):
            raise ValueError("num_stacked_lstms must be 1 or 2")
        if self.mlp_layers < 1 or self.config_mlp_layers < 1:
            raise ValueError("MLP layer counts must be positive")


@dataclass
class VrnnModel:
    """Parameters are held in a flat ``name -> array`` dict.

    Names: ``h1.W0``/``h1.b0``... for the config encoders, ``r1.W``/``r1.b``
    for the LSTMs (gate rows ordered input, forget, candidate, output; columns
    ordered [block input, previous hidden]), and ``h3.W0``... for the head.
    """

    params: dict[str, np.ndarray]
    arch: Architecture
    config_dim: int
    dropout: float

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def stacked(self) -> int:
        return self.arch.num_stacked_lstms

    def n_layers(self, block: str) -> int:
        return sum(1 for k in self.params if k.startswith(block + ".W"))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def copy(self) -> "VrnnModel":
        return VrnnModel({k: v.copy() for k, v in self.params.items()},
                         self.arch, self.config_dim, self.dropout)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "type": "vrnn",
            "config_dim": self.config_dim,
            "dropout": self.dropout,
            "arch": asdict(self.arch),
            "params": {
                k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                for k, v in sorted(self.params.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VrnnModel":
        if d.get("format_version") != FORMAT_VERSION or d.get("type") != "vrnn":
            raise ValueError("not a supported vrnn model document")
        params = {
            k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
            for k, v in d["params"].items()
        }
        return cls(params, Architecture(**d["arch"]), int(d["config_dim"]), float(d["dropout"]))


@dataclass(frozen=True)
class DropoutMasks:
    z1: np.ndarray
    z2: np.ndarray


def _layer_shapes(block: str, arch: Architecture, config_dim: int) -> list[tuple[int, int]]:
    if block in ("h1", "h2"):
        c = arch.config_mlp_units
        return [(config_dim, c)] + [(c, c)] * (arch.config_mlp_layers - 1)
    u = arch.mlp_units
    return [(arch.lstm_units, u)] + [(u, u)] * (arch.mlp_layers - 1) + [(u, 1)]


def init_model(config_dim: int, arch: Architecture = Architecture(), dropout: float = 0.1,
               seed: int = 0) -> VrnnModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization of every weight and bias."""
    if config_dim < 1:
        raise ValueError("config_dim must be positive")
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)

    blocks = ["h1", "h2"] if arch.num_stacked_lstms == 2 else ["h1"]
    for block in blocks + ["h3"]:
        for i, (fan_in, fan_out) in enumerate(_layer_shapes(block, arch, config_dim)):
            params[f"{block}.W{i}"] = uniform((fan_out, fan_in), fan_in)
            params[f"{block}.b{i}"] = uniform(fan_out, fan_in)
    H = arch.lstm_units
    C = arch.config_mlp_units
    lstm_inputs = {"r1": C + 1, "r2": C + H}
    for block in ["r1", "r2"][: arch.num_stacked_lstms]:
        fan_in = lstm_inputs[block] + H
        params[f"{block}.W"] = uniform((4 * H, fan_in), fan_in)
        params[f"{block}.b"] = uniform(4 * H, fan_in)
    return VrnnModel(params, arch, config_dim, dropout)


def sample_masks(model: VrnnModel, rng: np.random.Generator, n: int | None = None) -> DropoutMasks:
    """Keep each unit with probability 1 - d; ``n`` adds a leading batch axis."""
    C = model.arch.config_mlp_units
    shape = (C,) if n is None else (n, C)
    keep = 1.0 - model.dropout
    z1 = (rng.random(shape) < keep).astype(np.float64)
    z2 = (rng.random(shape) < keep).astype(np.float64)
    return DropoutMasks(z1, z2)


# ---------------------------------------------------------------------------
# building blocks


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _mlp_forward(params, block, n_layers, x):
    """Hidden layers use tanh, the last layer is linear. Returns output and cache."""
    acts = [x]
    for i in range(n_layers):
        x = x @ params[f"{block}.W{i}"].T + params[f"{block}.b{i}"]
        if i < n_layers - 1:
            x = np.tanh(x)
        acts.append(x)
    return x, acts


def _mlp_backward(params, block, n_layers, acts, grad_out, grads):
    g = grad_out
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        grads[f"{block}.W{i}"] += g.T @ acts[i]
        grads[f"{block}.b{i}"] += g.sum(axis=0)
        g = g @ params[f"{block}.W{i}"]
    return g


def _lstm_step(W, b, x, h, c):
    H = h.shape[-1]
    xh = np.concatenate([x, h], axis=-1)
    gates = xh @ W.T + b
    i = _sigmoid(gates[..., :H])
    f = _sigmoid(gates[..., H:2 * H])
    g = np.tanh(gates[..., 2 * H:3 * H])
    o = _sigmoid(gates[..., 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, i, f, g, o, c, tc)


def _lstm_step_backward(W, cache, dh, dc, gW, gb):
    xh, i, f, g, o, c_prev, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc**2)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dgates = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), dg * (1 - g**2), do * o * (1 - o)], axis=-1
    )
    gW += dgates.T @ xh
    gb += dgates.sum(axis=0)
    dxh = dgates @ W
    return dxh, dc_prev


@dataclass
class RecurrentState:
    """Hidden and cell state of each LSTM level, shape (batch, H)."""

    h: list[np.ndarray]
    c: list[np.ndarray]

    @classmethod
    def zeros(cls, model: VrnnModel, n: int) -> "RecurrentState":
        H = model.arch.lstm_units
        k = model.stacked
        return cls([np.zeros((n, H)) for _ in range(k)], [np.zeros((n, H)) for _ in range(k)])

    def copy(self) -> "RecurrentState":
        return RecurrentState([a.copy() for a in self.h], [a.copy() for a in self.c])


def config_embeddings(model: VrnnModel, X: np.ndarray, masks: DropoutMasks):
    """Masked config encodings (e1, e2) for a batch; e2 is None for one LSTM."""
    p = model.params
    e1 = _mlp_forward(p, "h1", model.n_layers("h1"), X)[0] * masks.z1
    e2 = None
    if model.stacked == 2:
        e2 = _mlp_forward(p, "h2", model.n_layers("h2"), X)[0] * masks.z2
    return e1, e2


def step_batch(model: VrnnModel, e1, e2, prev_y: np.ndarray, state: RecurrentState):
    """Advance a batch by one epoch. Returns (y_hat (n,), new state)."""
    p = model.params
    h1, c1, _ = _lstm_step(p["r1.W"], p["r1.b"],
                           np.concatenate([e1, prev_y[:, None]], axis=1),
                           state.h[0], state.c[0])
    hs, cs = [h1], [c1]
    top = h1
    if model.stacked == 2:
        h2, c2, _ = _lstm_step(p["r2.W"], p["r2.b"], np.concatenate([e2, h1], axis=1),
                               state.h[1], state.c[1])
        hs.append(h2)
        cs.append(c2)
        top = h2
    out, _ = _mlp_forward(p, "h3", model.n_layers("h3"), top)
    return out[:, 0], RecurrentState(hs, cs)


def _as_batch_masks(masks: DropoutMasks) -> DropoutMasks:
    return DropoutMasks(np.atleast_2d(masks.z1), np.atleast_2d(masks.z2))


def mc_rollout_step(model: VrnnModel, config, prev_y: float, state: RecurrentState | None,
                    masks: DropoutMasks):
    """One stochastic step for a single sequence; ``state=None`` means a fresh zero state."""
    X = np.asarray(getattr(config, "values", config), dtype=np.float64).reshape(1, -1)
    if X.shape[1] != model.config_dim:
        raise ValueError("config dimension mismatch")
    if state is None:
        state = RecurrentState.zeros(model, 1)
    e1, e2 = config_embeddings(model, X, _as_batch_masks(masks))
    y, new_state = step_batch(model, e1, e2, np.array([float(prev_y)]), state)
    return float(y[0]), new_state


def forward_sequence(model: VrnnModel, config, inputs, masks: DropoutMasks) -> np.ndarray:
    """Predictions [y_1..y_T] from inputs [y_0..y_{T-1}] with fixed masks."""
    inputs = np.asarray(inputs, dtype=np.float64).reshape(-1)
    if inputs.size == 0:
        raise ValueError("empty input sequence")
    X = np.asarray(getattr(config, "values", config), dtype=np.float64).reshape(1, -1)
    if X.shape[1] != model.config_dim:
        raise ValueError("config dimension mismatch")
    e1, e2 = config_embeddings(model, X, _as_batch_masks(masks))
    state = RecurrentState.zeros(model, 1)
    out = np.empty(inputs.size)
    for t in range(inputs.size):
        y, state = step_batch(model, e1, e2, inputs[t:t + 1], state)
        out[t] = y[0]
    return out


# ---------------------------------------------------------------------------
# loss and gradients


def batch_loss_and_gradients(model: VrnnModel, X, inputs, targets, weights, masks: DropoutMasks):
    """Weighted squared error ``sum(weights * (y_hat - targets)**2)`` and its gradient.

    ``X`` is (n, D); ``inputs``, ``targets`` and ``weights`` are (n, T);
    ``masks`` hold (n, C) arrays. Zero weights pad sequences of unequal length.
    """
    p = model.params
    n, T = inputs.shape
    k = model.stacked
    L1, L2, L3 = model.n_layers("h1"), model.n_layers("h2"), model.n_layers("h3")
    z1, z2 = masks.z1, masks.z2

    u1, acts1 = _mlp_forward(p, "h1", L1, X)
    e1 = u1 * z1
    if k == 2:
        u2, acts2 = _mlp_forward(p, "h2", L2, X)
        e2 = u2 * z2

    H = model.arch.lstm_units
    hs = [np.zeros((n, H)) for _ in range(k)]
    cs = [np.zeros((n, H)) for _ in range(k)]
    caches = []
    preds = np.empty((n, T))
    for t in range(T):
        h1, c1, cache1 = _lstm_step(p["r1.W"], p["r1.b"],
                                    np.concatenate([e1, inputs[:, t:t + 1]], axis=1),
                                    hs[0], cs[0])
        hs[0], cs[0] = h1, c1
        top = h1
        cache2 = None
        if k == 2:
            h2, c2, cache2 = _lstm_step(p["r2.W"], p["r2.b"],
                                        np.concatenate([e2, h1], axis=1), hs[1], cs[1])
            hs[1], cs[1] = h2, c2
            top = h2
        out, acts3 = _mlp_forward(p, "h3", L3, top)
        preds[:, t] = out[:, 0]
        caches.append((cache1, cache2, acts3))

    resid = preds - targets
    loss = float(np.sum(weights * resid**2))
    grads = {name: np.zeros_like(v) for name, v in p.items()}
    if not math.isfinite(loss):
        return loss, grads, preds

    C = model.arch.config_mlp_units
    d_out = 2.0 * weights * resid
    de1 = np.zeros_like(e1)
    de2 = np.zeros_like(e1) if k == 2 else None
    dh = [np.zeros((n, H)) for _ in range(k)]
    dc = [np.zeros((n, H)) for _ in range(k)]
    for t in reversed(range(T)):
        cache1, cache2, acts3 = caches[t]
        d_top = _mlp_backward(p, "h3", L3, acts3, d_out[:, t:t + 1], grads)
        if k == 2:
            dxh, dc[1] = _lstm_step_backward(p["r2.W"], cache2, d_top + dh[1], dc[1],
                                             grads["r2.W"], grads["r2.b"])
            de2 += dxh[:, :C]
            d_h1 = dxh[:, C:C + H]
            dh[1] = dxh[:, C + H:]
        else:
            d_h1 = d_top
        dxh, dc[0] = _lstm_step_backward(p["r1.W"], cache1, d_h1 + dh[0], dc[0],
                                         grads["r1.W"], grads["r1.b"])
        de1 += dxh[:, :C]
        dh[0] = dxh[:, C + 1:]

    _mlp_backward(p, "h1", L1, acts1, de1 * z1, grads)
    if k == 2:
        _mlp_backward(p, "h2", L2, acts2, de2 * z2, grads)
    return loss, grads, preds


def loss_and_gradients(model: VrnnModel, config, targets, masks: DropoutMasks,
                       y0: float = 0.0):
    """Sequence MSE under teacher forcing (inputs y_0, y_1..y_{T-1}) and its gradients."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    T = targets.size
    if T < 1:
        raise ValueError("need at least one target")
    X = np.asarray(getattr(config, "values", config), dtype=np.float64).reshape(1, -1)
    inputs = np.concatenate([[y0], targets[:-1]])[None, :]
    weights = np.full((1, T), 1.0 / T)
    loss, grads, _ = batch_loss_and_gradients(
        model, X, inputs, targets[None, :], weights, _as_batch_masks(masks)
    )
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class VrnnTrainConfig:
    initial_lr: float = 0.027
    final_lr_fraction: float = 0.0008
    momentum: float = 0.9
    batch_size: int = 22
    epochs: int = 100
    scheduler: str = "cos"
    curriculum_initial_len: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise ValueError("final_lr_fraction must lie in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.curriculum_initial_len < 1:
            raise ValueError("batch_size, epochs and curriculum_initial_len must be positive")
        if self.scheduler not in ("cos", "exp", "const"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")


def learning_rate(cfg: VrnnTrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``."""
    if cfg.scheduler == "const" or cfg.epochs == 1:
        return cfg.initial_lr
    frac = (epoch - 1) / (cfg.epochs - 1)
    final = cfg.initial_lr * cfg.final_lr_fraction
    if cfg.scheduler == "exp":
        if epoch == cfg.epochs:
            return final
        return cfg.initial_lr * cfg.final_lr_fraction**frac
    return final + (cfg.initial_lr - final) * 0.5 * (1.0 + math.cos(math.pi * frac))


def curriculum_length(initial_len: int, full_len: int, epoch: int, epochs: int) -> int:
    """Linear ramp from ``initial_len`` at epoch 1 to ``full_len`` at the last epoch.

    Rounds half up and clamps to ``full_len``. A single-epoch run trains on
    full length.
    """
    if epochs == 1:
        return full_len
    exact = initial_len + (full_len - initial_len) * (epoch - 1) / (epochs - 1)
    return max(1, min(full_len, math.floor(exact + 0.5)))


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    skipped_batches: int = 0
    initial_full_loss: float = float("nan")
    final_full_loss: float = float("nan")


def _pack(curves, lengths):
    n = len(curves)
    T = max(lengths)
    inputs = np.zeros((n, T))
    targets = np.zeros((n, T))
    weights = np.zeros((n, T))
    for b, (curve, ell) in enumerate(zip(curves, lengths)):
        y = curve.values[:ell]
        targets[b, :ell] = y
        inputs[b, 1:ell] = y[:-1]
        weights[b, :ell] = 1.0 / (ell * n)
    X = np.stack([c.config.values for c in curves])
    return X, inputs, targets, weights


def full_length_loss(model: VrnnModel, curves, rng: np.random.Generator) -> float:
    """Mean per-sequence teacher-forced MSE over whole curves with sampled masks."""
    X, inputs, targets, weights = _pack(curves, [len(c) for c in curves])
    masks = sample_masks(model, rng, len(curves))
    loss, _, _ = batch_loss_and_gradients(model, X, inputs, targets, weights, masks)
    return loss


def train(model: VrnnModel, dataset: CurveDataset, cfg: VrnnTrainConfig):
    """SGD with momentum, curriculum over sequence length, fresh masks per sequence.

    Returns the trained copy of ``model`` and a :class:`TrainingLog`.
    """
    curves = list(dataset.curves)
    if not curves:
        raise ValueError("empty training set")
    for c in curves:
        if len(c) < cfg.curriculum_initial_len:
            raise ValueError(
                f"curve {c.id!r} has {len(c)} epochs, shorter than "
                f"curriculum_initial_len={cfg.curriculum_initial_len}"
            )
    if dataset.config_dim != model.config_dim:
        raise ValueError("dataset config dimension differs from the model's")

    model = model.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    eval_seed = np.random.SeedSequence([cfg.seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    history = TrainingLog()
    history.initial_full_loss = full_length_loss(model, curves, np.random.default_rng(eval_seed))

    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(len(curves))
        total, n_batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [curves[i] for i in order[start:start + cfg.batch_size]]
            lengths = [curriculum_length(cfg.curriculum_initial_len, len(c), epoch, cfg.epochs)
                       for c in batch]
            X, inputs, targets, weights = _pack(batch, lengths)
            masks = sample_masks(model, rng, len(batch))
            loss, grads, _ = batch_loss_and_gradients(model, X, inputs, targets, weights, masks)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                history.skipped_batches += 1
                log.warning("epoch %d: non-finite loss, batch skipped", epoch)
                continue
            for name, g in grads.items():
                velocity[name] = cfg.momentum * velocity[name] - lr * g
                model.params[name] += velocity[name]
            total += loss
            n_batches += 1
        history.epochs.append({
            "epoch": epoch,
            "lr": lr,
            "curriculum_len": curriculum_length(
                cfg.curriculum_initial_len, max(len(c) for c in curves), epoch, cfg.epochs),
            "loss": total / max(n_batches, 1),
        })
        log.debug("epoch %d lr=%.3g loss=%.6g", epoch, lr, history.epochs[-1]["loss"])

    history.final_full_loss = full_length_loss(model, curves, np.random.default_rng(eval_seed))
    return model, history


def save_model(model: VrnnModel, path, **extra) -> None:
    with open(Path(path), "w") as fh:
        json.dump({**extra, **model.to_dict()}, fh, separators=(",", ":"))
        fh.write("\n")
