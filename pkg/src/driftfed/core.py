"""Flat parameter vectors, labeled datasets, loss models, and proximal SGD.

Everything here is a pure function over immutable inputs; parameter vectors
are 1-D float64 arrays frozen after creation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NumericFailure(RuntimeError):
    """A computation produced non-finite values."""


def as_param_vector(values) -> np.ndarray:
    """Copy `values` into a frozen 1-D float64 array, rejecting NaN/Inf."""
    vec = np.array(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"parameter vector must be 1-D, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise NumericFailure("parameter vector contains non-finite entries")
    vec.flags.writeable = False
    return vec


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix (n x d_in) with integer class labels in [0, C)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels must be 1-D and aligned with features")
        if features.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if not np.all(np.isfinite(features)):
            raise ValueError("feature rows must be finite")
        if np.any(labels < 0):
            raise ValueError("labels must be non-negative class indices")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.features[index], self.labels[index])


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class LossModel:
    """Differentiable classifier over flat parameter vectors."""

    architecture: str

    def __init__(self, input_dim: int, num_classes: int):
        if input_dim < 1 or num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        self.input_dim = input_dim
        self.num_classes = num_classes

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def logits(self, params: np.ndarray, features: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, params: np.ndarray, data: LabeledDataset) -> np.ndarray:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
        return as_param_vector(rng.uniform(-scale, scale, size=self.dim))

    def check(self, params: np.ndarray, data: LabeledDataset | None = None):
        if params.shape != (self.dim,):
            raise ValueError(
                f"parameter dimension {params.shape} does not match model ({self.dim},)"
            )
        if data is not None:
            if data.input_dim != self.input_dim:
                raise ValueError("dataset feature dimension does not match model")
            if int(data.labels.max()) >= self.num_classes:
                raise ValueError("dataset contains labels outside [0, C)")

    def predict_proba(self, params: np.ndarray, features: np.ndarray) -> np.ndarray:
        return np.exp(_log_softmax(self.logits(params, features)))

    def predict(self, params: np.ndarray, features: np.ndarray) -> np.ndarray:
        return self.logits(params, features).argmax(axis=1)

    def accuracy(self, params: np.ndarray, data: LabeledDataset) -> float:
        self.check(params, data)
        return float(np.mean(self.predict(params, data.features) == data.labels))

    def pointwise_loss(self, params: np.ndarray, data: LabeledDataset) -> np.ndarray:
        """Per-sample cross-entropy, length n."""
        self.check(params, data)
        logp = _log_softmax(self.logits(params, data.features))
        return -logp[np.arange(data.n), data.labels]


class SoftmaxRegression(LossModel):
    """Linear logits with bias; params = [W (d_in*C), b (C)]."""

    architecture = "softmax-regression"

    @property
    def dim(self) -> int:
        return (self.input_dim + 1) * self.num_classes

    def _unpack(self, params):
        split = self.input_dim * self.num_classes
        W = params[:split].reshape(self.input_dim, self.num_classes)
        b = params[split:]
        return W, b

    def logits(self, params, features):
        W, b = self._unpack(params)
        return features @ W + b

    def gradient(self, params, data):
        self.check(params, data)
        proba = self.predict_proba(params, data.features)
        proba[np.arange(data.n), data.labels] -= 1.0
        proba /= data.n
        gW = data.features.T @ proba
        gb = proba.sum(axis=0)
        return np.concatenate([gW.ravel(), gb])


class TwoLayerMLP(LossModel):
    """One tanh hidden layer; params = [W1, b1, W2, b2] flattened."""

    architecture = "two-layer-mlp"

    def __init__(self, input_dim: int, num_classes: int, hidden_units: int):
        super().__init__(input_dim, num_classes)
        if hidden_units < 1:
            raise ValueError("hidden_units must be positive")
        self.hidden_units = hidden_units

    @property
    def dim(self) -> int:
        h, c = self.hidden_units, self.num_classes
        return self.input_dim * h + h + h * c + c

    def _unpack(self, params):
        d, h, c = self.input_dim, self.hidden_units, self.num_classes
        o = 0
        W1 = params[o : o + d * h].reshape(d, h)
        o += d * h
        b1 = params[o : o + h]
        o += h
        W2 = params[o : o + h * c].reshape(h, c)
        o += h * c
        b2 = params[o:]
        return W1, b1, W2, b2

    def logits(self, params, features):
        W1, b1, W2, b2 = self._unpack(params)
        return np.tanh(features @ W1 + b1) @ W2 + b2

    def gradient(self, params, data):
        self.check(params, data)
        W1, b1, W2, b2 = self._unpack(params)
        hidden = np.tanh(data.features @ W1 + b1)
        proba = np.exp(_log_softmax(hidden @ W2 + b2))
        proba[np.arange(data.n), data.labels] -= 1.0
        proba /= data.n
        gW2 = hidden.T @ proba
        gb2 = proba.sum(axis=0)
        delta = (proba @ W2.T) * (1.0 - hidden**2)
        gW1 = data.features.T @ delta
        gb1 = delta.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


def make_loss_model(
    architecture: str, input_dim: int, num_classes: int, hidden_units: int | None = None
) -> LossModel:
    if architecture == "softmax-regression":
        return SoftmaxRegression(input_dim, num_classes)
    if architecture == "two-layer-mlp":
        if hidden_units is None:
            raise ValueError("two-layer-mlp requires hidden_units")
        return TwoLayerMLP(input_dim, num_classes, hidden_units)
    raise ValueError(f"unknown architecture {architecture!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Local-training hyper-parameters."""

    learning_rate: float
    proximal_weight: float
    min_local_steps: int
    max_local_steps: int
    batch_size: int | None = None  # None = full batch

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.proximal_weight < 0:
            raise ValueError("proximal_weight must be non-negative")
        if self.min_local_steps < 1 or self.min_local_steps > self.max_local_steps:
            raise ValueError("need 1 <= min_local_steps <= max_local_steps")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None for full batch")


def empirical_loss(model: LossModel, params: np.ndarray, data: LabeledDataset) -> float:
    """Mean cross-entropy of `params` over `data`."""
    loss = float(model.pointwise_loss(params, data).mean())
    if not np.isfinite(loss):
        raise NumericFailure("empirical loss is non-finite")
    return loss


def loss_gradient(model: LossModel, params: np.ndarray, data: LabeledDataset) -> np.ndarray:
    grad = model.gradient(params, data)
    if not np.all(np.isfinite(grad)):
        raise NumericFailure("loss gradient is non-finite")
    return grad


def proximal_gradient(
    model: LossModel,
    params: np.ndarray,
    anchor: np.ndarray,
    proximal_weight: float,
    data: LabeledDataset,
) -> np.ndarray:
    """Gradient of mean loss plus the quadratic pull toward `anchor`."""
    if params.shape != anchor.shape:
        raise ValueError("params and anchor must share a dimension")
    return loss_gradient(model, params, data) + proximal_weight * (params - anchor)


def _batch_schedule(n: int, batch_size: int | None, steps: int, rng):
    """Index batches for `steps` updates: without-replacement passes, reshuffled."""
    if batch_size is None or batch_size >= n:
        full = np.arange(n)
        return [full] * steps
    if rng is None:
        raise ValueError("mini-batch training requires an rng")
    batches = []
    while len(batches) < steps:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            batches.append(order[start : start + batch_size])
            if len(batches) == steps:
                break
    return batches


def local_train(
    model: LossModel,
    start: np.ndarray,
    anchor: np.ndarray,
    cfg: TrainConfig,
    data: LabeledDataset,
    steps: int,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run exactly `steps` proximal-SGD updates from `start` with `anchor` fixed."""
    if not (cfg.min_local_steps <= steps <= cfg.max_local_steps):
        raise ValueError(
            f"steps={steps} outside [{cfg.min_local_steps}, {cfg.max_local_steps}]"
        )
    model.check(start, data)
    if start.shape != anchor.shape:
        raise ValueError("start and anchor must share a dimension")
    v = np.array(start)
    for step, index in enumerate(_batch_schedule(data.n, cfg.batch_size, steps, rng)):
        batch = data.subset(index) if index.shape[0] != data.n else data
        grad = model.gradient(v, batch) + cfg.proximal_weight * (v - anchor)
        v -= cfg.learning_rate * grad
        if not np.all(np.isfinite(v)):
            raise NumericFailure(f"parameters diverged at local step {step}")
    return as_param_vector(v)


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError("l2_distance requires equal dimensions")
    return float(np.linalg.norm(a - b))


SIMPLEX_TOL = 1e-9


def aggregate(models, weights) -> np.ndarray:
    """Convex combination of equally-sized parameter vectors."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(models) != weights.shape[0]:
        raise ValueError("one weight per model required")
    if np.any(weights < -SIMPLEX_TOL) or abs(weights.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("weights must lie on the probability simplex")
    dims = {m.shape for m in models}
    if len(dims) != 1:
        raise ValueError("all models must share a dimension")
    out = np.zeros_like(models[0])
    for w, m in zip(weights, models):
        out += w * m
    return as_param_vector(out)
