"""MSE training with Adam, seeded mini-batches and validation early stopping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .neuralnet import ModelSpec, ParameterSet, _backward, _forward, init_params


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError(f"training hyperparameters must be positive: {self}")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParameterSet, **kw):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def mse_loss(pred, truth):
    """Mean squared error over all ``S * 2`` entries and its gradient."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    diff = pred - truth
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def adam_step(params: ParameterSet, grads: ParameterSet, state: OptimizerState, lr: float):
    """One bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` misses."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def fit_output_scaling(spec: ModelSpec, labels) -> ModelSpec:
    """Return ``spec`` with the head's fixed offset/scale set from label statistics."""
    labels = np.asarray(labels, dtype=float)
    sd = labels.std(axis=0)
    sd[sd == 0] = 1.0
    return replace(spec, out_offset=tuple(labels.mean(axis=0)), out_scale=tuple(sd))


def predict(spec: ModelSpec, params: ParameterSet, features, batch_size: int = 256):
    out = [
        _forward(spec, features[i : i + batch_size], params)[0]
        for i in range(0, len(features), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros((0, spec.output_dim))


def dataset_loss(spec, params, dataset, batch_size: int = 256) -> float:
    pred = predict(spec, params, dataset.features, batch_size)
    return mse_loss(pred, dataset.labels)[0]


def train(
    spec: ModelSpec,
    train_set,
    val_set,
    config: TrainConfig = TrainConfig(),
    params=None,
    callback=None,
):
    """Fit ``spec`` to ``train_set``; return the best-validation parameters and history.

    Each epoch visits the training windows in a freshly shuffled order.
    ``callback(epoch, params, history)`` runs after every epoch and may return
    True to stop early.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    for name, ds in (("training", train_set), ("validation", val_set)):
        if ds.features.shape[1:] != (spec.T, spec.in_channels):
            raise ValueError(
                f"{name} windows have shape {ds.features.shape[1:]}, model expects "
                f"{(spec.T, spec.in_channels)}"
            )
    if params is None:
        params = init_params(spec, config.seed)
    else:
        params = {k: np.array(v, dtype=float) for k, v in params.items()}
    rng = np.random.default_rng(config.seed)
    state = OptimizerState.zeros_like(params)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best = {k: p.copy() for k, p in params.items()}
    X, Y = train_set.features, train_set.labels
    S = len(Y)

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(S)
        total = 0.0
        for b, start in enumerate(range(0, S, config.batch_size)):
            idx = order[start : start + config.batch_size]
            pred, cache = _forward(spec, X[idx], params)
            loss, dpred = mse_loss(pred, Y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, batch {b}")
            grads = _backward(spec, cache, params, dpred)
            adam_step(params, grads, state, config.learning_rate)
            total += loss * len(idx)
        val = dataset_loss(spec, params, val_set)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(total / S)
        history.val_loss.append(val)
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            best = {k: p.copy() for k, p in params.items()}
        history.stopped_epoch = epoch
        if callback is not None and callback(epoch, params, history):
            stop = True
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    return best, history
