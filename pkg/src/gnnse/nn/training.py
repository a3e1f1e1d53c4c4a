"""Adam, mini-batch training and de-normalised prediction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import loss_mse
from .models import GnnModel, MlpModel, Model, Normalizer

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    full_batch: bool = False


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Model
    loss: list[float]
    val_loss: list[float]


def to_node_major(x: np.ndarray) -> np.ndarray:
    """(batch, n, f) -> (n, batch, f)."""
    return np.ascontiguousarray(np.swapaxes(x, 0, 1))


def _model_io(model: Model, feats: np.ndarray, labels: Optional[np.ndarray]):
    """Normalise and lay out inputs/targets as the model's forward expects."""
    x = model.in_norm.apply(feats)
    y = model.out_norm.apply(labels) if labels is not None else None
    if isinstance(model, GnnModel):
        return to_node_major(x), (to_node_major(y) if y is not None else None)
    n = feats.shape[0]
    return x.reshape(n, -1), (y.reshape(n, -1) if y is not None else None)


def batch_loss(model: Model, x, y, graph) -> tuple[float, dict]:
    pred, caches = model.forward(x, graph)
    loss, dpred = loss_mse(pred, y)
    return loss, model.backward(dpred, caches)


def train(model: Model, features: np.ndarray, labels: np.ndarray, adj=None,
          cfg: TrainConfig = TrainConfig(), val: Optional[tuple[np.ndarray, np.ndarray]] = None,
          progress=None) -> TrainResult:
    """Fit ``model`` on (samples, n, 2) features/labels in physical units.

    Labels are (magnitude pu, angle rad). Normalisers are fitted here if the
    model has none. Shuffling draws from ``cfg.seed`` only.
    """
    if model.in_norm is None:
        model.in_norm = Normalizer.fit(features)
    if model.out_norm is None:
        model.out_norm = Normalizer.fit(labels)
    graph = model.graph(adj) if isinstance(model, GnnModel) else None
    x_all, y_all = _model_io(model, features, labels)
    val_io = _model_io(model, *val) if val is not None else None
    gnn = isinstance(model, GnnModel)
    n = features.shape[0]
    bs = n if cfg.full_batch else min(cfg.batch_size, n)
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState(lr=cfg.lr)
    params = model.named_params()
    history, val_history = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = np.sort(order[start:start + bs])
            xb = x_all[:, idx] if gnn else x_all[idx]
            yb = y_all[:, idx] if gnn else y_all[idx]
            loss, grads = batch_loss(model, xb, yb, graph)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            adam_step(params, grads, state)
            total += loss * idx.size
        history.append(total / n)
        if val_io is not None:
            pred, _ = model.forward(val_io[0], graph)
            val_history.append(loss_mse(pred, val_io[1])[0])
        if progress is not None:
            progress(epoch, history[-1], val_history[-1] if val_history else None)
    model.meta.update({"epochs": cfg.epochs, "lr": cfg.lr, "batch_size": bs, "seed": cfg.seed,
                       "final_loss": history[-1] if history else None})
    return TrainResult(model, history, val_history)


def predict(model: Model, features: np.ndarray, adj=None, chunk: int = 500) -> np.ndarray:
    """De-normalised estimates (samples, n, 2): magnitude in pu, angle in degrees.

    ``adj`` may differ from the training topology; an MLP ignores it.
    """
    features = np.asarray(features, dtype=float)
    single = features.ndim == 2
    if single:
        features = features[None]
    n_bus = model.in_norm.mean.shape[0]
    if features.shape[1:] != (n_bus, 2):
        raise ValueError(f"expected features of shape (N, {n_bus}, 2), got {features.shape}")
    graph = model.graph(adj) if isinstance(model, GnnModel) else None
    outs = []
    for start in range(0, features.shape[0], chunk):
        x, _ = _model_io(model, features[start:start + chunk], None)
        y, _ = model.forward(x, graph)
        y = np.swapaxes(y, 0, 1) if isinstance(model, GnnModel) else y.reshape(-1, n_bus, 2)
        outs.append(model.out_norm.invert(y))
    out = np.concatenate(outs)
    out[..., 1] = np.rad2deg(out[..., 1])
    return out[0] if single else out


def new_model(arch: str, n_bus: int, seed: int, hidden: Optional[int] = None, **kwargs) -> Model:
    rng = np.random.default_rng([seed, 0])
    if arch == "gnn":
        return GnnModel.init(rng, hidden=hidden or 64, **kwargs)
    if arch in ("mlp", "dnn"):
        return MlpModel.init(rng, 2 * n_bus, 2 * n_bus, hidden=hidden or 200, **kwargs)
    raise ValueError(f"unknown architecture {arch!r}")
