"""Softmax classifiers trained by minibatch SGD with an optional confidence
penalty.

The penalty is the negative Shannon entropy of the predicted distribution,
sum_c p_c log p_c, weighted by zeta. It is zero for one-hot output and most
negative for uniform output, so positive zeta pushes training away from
overconfident predictions. The early-stop threshold watches the
cross-entropy term alone; the penalized total can reach zero at a uniform
predictor and would otherwise stop training immediately.
"""

import json
from dataclasses import dataclass

import numpy as np

from ._rng import stream
from .types import LabeledDataset, PROB_FLOOR, ProbabilityMatrix

ARCHITECTURES = ("linear", "mlp")

SAVE_FORMAT = "labelshift-predictor"
SAVE_VERSION = 1


@dataclass(frozen=True)
class PredictorConfig:
    """Architecture plus SGD hyperparameters.

    hidden_units is ignored for the linear architecture. zeta scales the
    confidence penalty; zeta = 0 recovers plain cross-entropy training.
    """

    architecture: str = "linear"
    hidden_units: int = 32
    learning_rate: float = 0.1
    batch_size: int = 64
    max_epochs: int = 100
    loss_threshold: float = 0.05
    zeta: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "mlp" and self.hidden_units < 1:
            raise ValueError("mlp needs at least one hidden unit")
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")
        if self.loss_threshold < 0:
            raise ValueError("loss_threshold must be nonnegative")
        if self.zeta < 0:
            raise ValueError("zeta must be nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass(frozen=True)
class Predictor:
    """Trained (or freshly initialized) model: flat parameter vector plus the
    shape metadata needed to unpack it."""

    parameters: np.ndarray
    architecture: str
    hidden_units: int
    m: int
    d: int

    def __post_init__(self):
        p = np.array(self.parameters, dtype=np.float64)
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        expected = _param_count(self.architecture, self.hidden_units, self.m, self.d)
        if p.ndim != 1 or p.size != expected:
            raise ValueError(f"expected {expected} parameters, got {p.size}")
        if not np.all(np.isfinite(p)):
            raise ValueError("parameters contain non-finite values")
        p.setflags(write=False)
        object.__setattr__(self, "parameters", p)


def _param_count(arch: str, hidden: int, m: int, d: int) -> int:
    if arch == "linear":
        return d * m + m
    return d * hidden + hidden + hidden * m + m


def _unpack(params: np.ndarray, arch: str, hidden: int, m: int, d: int):
    if arch == "linear":
        w = params[: d * m].reshape(d, m)
        b = params[d * m :]
        return (w, b)
    o = d * hidden
    w1 = params[:o].reshape(d, hidden)
    b1 = params[o : o + hidden]
    o += hidden
    w2 = params[o : o + hidden * m].reshape(hidden, m)
    b2 = params[o + hidden * m :]
    return (w1, b1, w2, b2)


def init_predictor(cfg: PredictorConfig, m: int, d: int) -> Predictor:
    """Seeded initialization: each layer uniform in +-1/sqrt(fan_in)."""
    if m < 2 or d < 1:
        raise ValueError("need m >= 2 classes and d >= 1 features")
    rng = stream(cfg.seed, 0x1)
    hidden = cfg.hidden_units if cfg.architecture == "mlp" else 0
    if cfg.architecture == "linear":
        shapes = [((d, m), d), ((m,), d)]
    else:
        shapes = [((d, hidden), d), ((hidden,), d), ((hidden, m), hidden), ((m,), hidden)]
    parts = []
    for shape, fan_in in shapes:
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=shape).ravel())
    return Predictor(np.concatenate(parts), cfg.architecture, hidden, m, d)


def _forward(params, arch, hidden, m, d, x):
    """Returns (log-probabilities, pre-activations of the hidden layer or None)."""
    if arch == "linear":
        w, b = _unpack(params, arch, hidden, m, d)
        z = x @ w + b
        pre = None
    else:
        w1, b1, w2, b2 = _unpack(params, arch, hidden, m, d)
        pre = x @ w1 + b1
        z = np.maximum(pre, 0.0) @ w2 + b2
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return logp, pre


def entropy_penalty(p) -> float:
    """sum_c p_c log p_c for one probability vector; <= 0, zero iff one-hot."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.sum(p * np.log(np.maximum(p, PROB_FLOOR))))


def regularized_loss(pred: Predictor, batch: LabeledDataset, zeta: float) -> float:
    """Mean cross-entropy plus zeta times the mean confidence penalty."""
    if batch.d != pred.d:
        raise ValueError("feature dimension does not match the predictor")
    logp, _ = _forward(
        pred.parameters, pred.architecture, pred.hidden_units, pred.m, pred.d, batch.features
    )
    p = np.exp(logp)
    ce = -logp[np.arange(batch.n), batch.labels].mean()
    pen = np.sum(p * logp, axis=1).mean()
    return float(ce + zeta * pen)


def _loss_and_grad(params, arch, hidden, m, d, x, y, zeta, weights=None):
    """Weighted loss and its gradient in the flat parameter layout.

    Per-sample losses are scaled by weights (default all ones) and averaged.
    Returns (total loss, mean weighted cross-entropy, gradient).
    """
    n = x.shape[0]
    logp, pre = _forward(params, arch, hidden, m, d, x)
    p = np.exp(logp)
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
    picked = logp[np.arange(n), y]
    ce = float(-(w * picked).mean())
    pen_rows = np.sum(p * logp, axis=1)
    total = float(ce + zeta * (w * pen_rows).mean())

    # d/dz of the cross-entropy is p - onehot; of the penalty, p*(logp - pen).
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    if zeta:
        dz += zeta * p * (logp - pen_rows[:, None])
    dz *= w[:, None] / n

    if arch == "linear":
        gw = x.T @ dz
        gb = dz.sum(axis=0)
        grad = np.concatenate([gw.ravel(), gb])
    else:
        w1, b1, w2, b2 = _unpack(params, arch, hidden, m, d)
        h = np.maximum(pre, 0.0)
        gw2 = h.T @ dz
        gb2 = dz.sum(axis=0)
        dh = dz @ w2.T
        dh[pre <= 0] = 0.0
        gw1 = x.T @ dh
        gb1 = dh.sum(axis=0)
        grad = np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])
    return total, ce, grad


def loss_gradient(pred: Predictor, batch: LabeledDataset, zeta: float) -> np.ndarray:
    """Gradient of regularized_loss with respect to the flat parameters."""
    _, _, grad = _loss_and_grad(
        pred.parameters,
        pred.architecture,
        pred.hidden_units,
        pred.m,
        pred.d,
        batch.features,
        batch.labels,
        zeta,
    )
    return grad


def train_predictor(train: LabeledDataset, cfg: PredictorConfig) -> Predictor:
    """Minibatch SGD on the penalized loss.

    Epochs stop early once the running mean of the cross-entropy term drops
    below cfg.loss_threshold. max_epochs = 0 returns the seeded
    initialization untouched. Non-finite loss raises with the epoch number.
    """
    pred = init_predictor(cfg, train.m, train.d)
    params = pred.parameters.copy()
    arch, hidden = cfg.architecture, pred.hidden_units
    x, y = train.features, train.labels
    n = train.n
    order_rng = stream(cfg.seed, 0x2)
    for epoch in range(cfg.max_epochs):
        order = order_rng.permutation(n)
        ce_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            total, ce, grad = _loss_and_grad(
                params, arch, hidden, train.m, train.d, x[idx], y[idx], cfg.zeta
            )
            if not np.isfinite(total):
                raise RuntimeError(f"diverged at epoch {epoch}")
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * params
            params -= cfg.learning_rate * grad
            ce_sum += ce * idx.size
        if ce_sum / n < cfg.loss_threshold:
            break
    return Predictor(params, arch, hidden, train.m, train.d)


def predict_proba(pred: Predictor, features) -> ProbabilityMatrix:
    """Class probabilities for a feature matrix, floored and renormalized."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != pred.d:
        raise ValueError("features must be (n, d) matching the predictor")
    logp, _ = _forward(pred.parameters, pred.architecture, pred.hidden_units, pred.m, pred.d, x)
    return ProbabilityMatrix.from_rows(np.exp(logp))


def mean_loss(pred: Predictor, data: LabeledDataset, zeta: float = 0.0, weights=None) -> float:
    """Average (optionally weighted, optionally penalized) loss over a dataset."""
    total, _, _ = _loss_and_grad(
        pred.parameters,
        pred.architecture,
        pred.hidden_units,
        pred.m,
        pred.d,
        data.features,
        data.labels,
        zeta,
        weights=weights,
    )
    return total


def save_predictor(pred: Predictor, path) -> None:
    """Write the predictor as JSON; float values round-trip bit-exactly."""
    payload = {
        "format": SAVE_FORMAT,
        "version": SAVE_VERSION,
        "architecture": pred.architecture,
        "hidden_units": pred.hidden_units,
        "m": pred.m,
        "d": pred.d,
        "parameters": pred.parameters.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_predictor(path) -> Predictor:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != SAVE_FORMAT:
        raise ValueError(f"not a saved predictor: {path}")
    if payload.get("version") != SAVE_VERSION:
        raise ValueError(f"unsupported save version {payload.get('version')!r}")
    return Predictor(
        np.array(payload["parameters"], dtype=np.float64),
        payload["architecture"],
        int(payload["hidden_units"]),
        int(payload["m"]),
        int(payload["d"]),
    )
