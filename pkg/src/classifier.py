"""
Classifier module for VisionGuard.

The target classifier f: a fully-connected ReLU network with a softmax head,
trained from scratch with mini-batch SGD. Besides prediction it answers the
gradient queries the attacks and detectors need: cross-entropy gradient with
respect to the input, the per-class Jacobian of the softmax outputs and the
last hidden layer embedding.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np
from rich.progress import Progress
from scipy.special import logsumexp, softmax

from .errors import InvalidArgumentError, InvalidInputError

if TYPE_CHECKING:
    from .dataset_io import Dataset

__all__ = [
    'Mlp', 'TrainConfig', 'EpochMetrics', 'TrainResult', 'init_mlp', 'logits', 'forward',
    'predict_proba', 'predict', 'loss_grad_input', 'logits_grad_input',
    'logit_jacobian', 'penultimate_embedding', 'embed_batch', 'embedding_grad_input', 'train',
    'accuracy', 'checksum', 'check_labels',
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Mlp:
    """Immutable network parameters; weights[i] has shape (dims[i], dims[i+1])."""

    layer_dims: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise InvalidArgumentError(f"layer_dims must list at least input and output sizes, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise InvalidArgumentError("one weight matrix and one bias vector per layer are required")
        weights, biases = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64).reshape(-1)
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise InvalidArgumentError(
                    f"layer {i} has shapes {w.shape}/{b.shape}, expected {(dims[i], dims[i + 1])}/{(dims[i + 1],)}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidArgumentError(f"layer {i} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            weights.append(w)
            biases.append(b)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "biases", tuple(biases))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def embedding_dim(self) -> int:
        if len(self.layer_dims) < 3:
            raise InvalidArgumentError("model has no hidden layer to embed with")
        return self.layer_dims[-2]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    hidden_dims: Tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidArgumentError("epochs, batch_size and learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if any(h < 1 for h in self.hidden_dims):
            raise InvalidArgumentError("hidden layer sizes must be positive")


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float
    heldout_accuracy: Optional[float]


@dataclass
class TrainResult:
    model: Mlp
    history: List[EpochMetrics] = field(default_factory=list)


def init_mlp(layer_dims: Sequence[int], seed: int) -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in layer_dims]
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    biases = [np.zeros(d) for d in dims[1:]]
    return Mlp(tuple(dims), tuple(weights), tuple(biases))


def _as_batch(model: Mlp, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(X.shape[0], -1) if X.ndim > 1 else X.reshape(1, -1)
    if X.shape[1] != model.input_dim:
        raise InvalidInputError(f"input has {X.shape[1]} features, model expects {model.input_dim}")
    return X


def _as_single(model: Mlp, x) -> np.ndarray:
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    if flat.size != model.input_dim:
        raise InvalidInputError(f"input has {flat.size} features, model expects {model.input_dim}")
    return flat[None, :]


def _forward_cache(model: Mlp, X: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Pre-activations and activations of every layer; activations[-1] are logits."""
    pre, acts = [], [X]
    a = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return pre, acts


def _backprop_input(model: Mlp, pre: List[np.ndarray], upstream: np.ndarray, layer: int) -> np.ndarray:
    """Pull ``upstream`` (gradient w.r.t. the output of ``layer``) back to the input."""
    grad = upstream
    last = len(model.weights) - 1
    for i in range(layer, -1, -1):
        if i != last:
            grad = grad * (pre[i] > 0)
        grad = grad @ model.weights[i].T
    return grad


def logits(model: Mlp, x) -> np.ndarray:
    _, acts = _forward_cache(model, _as_single(model, x))
    return acts[-1][0]


def predict_proba(model: Mlp, X) -> np.ndarray:
    """Softmax outputs for a batch; X is (N, ...) with prod(...) == input_dim."""
    _, acts = _forward_cache(model, _as_batch(model, X))
    return softmax(acts[-1], axis=1)


def predict(model: Mlp, X) -> np.ndarray:
    return np.argmax(predict_proba(model, X), axis=1)


def forward(model: Mlp, x) -> np.ndarray:
    """Softmax output g(x) for a single image."""
    _, acts = _forward_cache(model, _as_single(model, x))
    return softmax(acts[-1][0])


def check_labels(model: Mlp, y) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= model.num_classes):
        raise InvalidArgumentError(f"labels must be integers in [0, {model.num_classes})")
    return y.astype(np.int64)


def loss_grad_input(model: Mlp, x, y: int) -> np.ndarray:
    """Exact gradient of cross-entropy J(theta, x, y) w.r.t. the pixels of x."""
    x = np.asarray(x, dtype=np.float64)
    labels = check_labels(model, np.array([y]))
    pre, acts = _forward_cache(model, _as_single(model, x))
    upstream = softmax(acts[-1], axis=1)
    upstream[0, labels[0]] -= 1.0
    return _backprop_input(model, pre, upstream, len(model.weights) - 1).reshape(x.shape)


def logits_grad_input(model: Mlp, x, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product: gradient of ``upstream . logits(x)`` w.r.t. x."""
    x = np.asarray(x, dtype=np.float64)
    pre, _ = _forward_cache(model, _as_single(model, x))
    upstream = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    return _backprop_input(model, pre, upstream, len(model.weights) - 1).reshape(x.shape)


def logit_jacobian(model: Mlp, x) -> np.ndarray:
    """Rows j = d f_j(x) / dx for the softmax outputs f_j; shape (classes, *x.shape)."""
    x = np.asarray(x, dtype=np.float64)
    pre, acts = _forward_cache(model, _as_single(model, x))
    p = softmax(acts[-1][0])
    num_classes = model.num_classes
    # row j of the softmax Jacobian: p_j * (e_j - p)
    upstream = p[:, None] * (np.eye(num_classes) - p[None, :])
    pre_rep = [np.repeat(z, num_classes, axis=0) for z in pre]
    rows = _backprop_input(model, pre_rep, upstream, len(model.weights) - 1)
    return rows.reshape((num_classes,) + x.shape)


def penultimate_embedding(model: Mlp, x) -> np.ndarray:
    """Activations of the last hidden layer."""
    _ = model.embedding_dim
    _, acts = _forward_cache(model, _as_single(model, x))
    return acts[-2][0]


def embed_batch(model: Mlp, X) -> np.ndarray:
    _ = model.embedding_dim
    _, acts = _forward_cache(model, _as_batch(model, X))
    return acts[-2]


def embedding_grad_input(model: Mlp, x, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``upstream . embedding(x)`` w.r.t. x."""
    _ = model.embedding_dim
    x = np.asarray(x, dtype=np.float64)
    pre, _ = _forward_cache(model, _as_single(model, x))
    upstream = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    return _backprop_input(model, pre, upstream, len(model.weights) - 2).reshape(x.shape)


def _batch_gradients(weights, biases, X, y):
    """Mean cross-entropy and its parameter gradients for one mini-batch."""
    last = len(weights) - 1
    pre, acts = [], [X]
    a = X
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    log_probs = acts[-1] - logsumexp(acts[-1], axis=1, keepdims=True)
    n = X.shape[0]
    loss = -float(np.mean(log_probs[np.arange(n), y]))
    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grad_w, grad_b = [None] * len(weights), [None] * len(weights)
    for i in range(last, -1, -1):
        if i != last:
            delta = delta * (pre[i] > 0)
        grad_w[i] = acts[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        delta = delta @ weights[i].T
    return loss, grad_w, grad_b


def train(dataset: "Dataset", config: TrainConfig, heldout: Optional["Dataset"] = None) -> TrainResult:
    """Mini-batch SGD with momentum; bit-reproducible for a fixed seed."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    X = dataset.images.reshape(len(dataset), -1)
    y = dataset.labels.astype(np.int64)
    dims = (X.shape[1],) + config.hidden_dims + (dataset.num_classes,)
    model = init_mlp(dims, config.seed)
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    rng = np.random.default_rng(config.seed)
    history: List[EpochMetrics] = []

    logger.info("training %s on %d examples (%s)", "-".join(map(str, dims)), len(dataset), dataset.name)
    with Progress(transient=True, disable=not logger.isEnabledFor(logging.INFO)) as progress:
        task = progress.add_task("training", total=config.epochs)
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(dataset))
            total_loss = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                loss, grad_w, grad_b = _batch_gradients(weights, biases, X[idx], y[idx])
                total_loss += loss * len(idx)
                for i in range(len(weights)):
                    vel_w[i] = config.momentum * vel_w[i] - config.learning_rate * grad_w[i]
                    vel_b[i] = config.momentum * vel_b[i] - config.learning_rate * grad_b[i]
                    weights[i] += vel_w[i]
                    biases[i] += vel_b[i]
            if not all(np.all(np.isfinite(w)) for w in weights):
                raise InvalidArgumentError(f"training diverged at epoch {epoch}; lower the learning rate")
            model = Mlp(dims, tuple(weights), tuple(biases))
            metrics = EpochMetrics(
                epoch=epoch,
                loss=total_loss / len(dataset),
                train_accuracy=accuracy(model, dataset),
                heldout_accuracy=accuracy(model, heldout) if heldout is not None and len(heldout) else None,
            )
            history.append(metrics)
            logger.info(
                "epoch %d: loss %.4f, train acc %.4f%s", epoch, metrics.loss, metrics.train_accuracy,
                "" if metrics.heldout_accuracy is None else f", held-out acc {metrics.heldout_accuracy:.4f}",
            )
            progress.advance(task)
    return TrainResult(model=model, history=history)


def accuracy(model: Mlp, dataset: "Dataset") -> float:
    """Fraction of images whose argmax prediction equals the label."""
    if len(dataset) == 0:
        raise InvalidInputError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(model, dataset.images) == dataset.labels))


def checksum(model: Mlp) -> str:
    """SHA-256 over layer dims and raw float64 parameters."""
    digest = hashlib.sha256()
    digest.update(np.asarray(model.layer_dims, dtype="<u4").tobytes())
    for w, b in zip(model.weights, model.biases):
        digest.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return digest.hexdigest()
