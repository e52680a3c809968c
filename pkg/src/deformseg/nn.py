"""Sigmoid feed-forward networks with denoising-autoencoder pre-training.

Every detector in the package is a stack of sigmoid layers. The hidden layers
are pre-trained greedily as tied-weight denoising autoencoders (squared
reconstruction error, masking noise) and the whole network is then fine-tuned
on labelled data with binary cross-entropy. Everything is plain numpy and
plain mini-batch SGD so that runs are a pure function of ``(data, seed)``.

RNG protocol (relied on by the reference tests): a single
``numpy.random.default_rng(seed)`` per training call draws, in order, the
initial weights, then for each epoch one permutation of the sample indices,
then (autoencoders only, when ``corruption_rate > 0``) one uniform array per
mini-batch for the masking noise.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateInputError, DimensionError, DivergenceError

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1000
    epochs: int = 100
    corruption_rate: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.corruption_rate < 1.0:
            raise ValueError("corruption_rate must lie in [0, 1)")


@dataclass
class EncoderLayer:
    """One pre-trained autoencoder layer: ``h = sigmoid(weight @ x + bias)``."""

    weight: np.ndarray
    bias: np.ndarray
    loss_trace: list = field(default_factory=list)

    @property
    def input_dim(self):
        return self.weight.shape[1]

    @property
    def output_dim(self):
        return self.weight.shape[0]

    def encode(self, X):
        return expit(np.asarray(X, dtype=np.float64) @ self.weight.T + self.bias)


def _freeze(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """An immutable stack of sigmoid layers.

    ``weights[i]`` has shape ``(layer_dims[i + 1], layer_dims[i])``.
    """

    layer_dims: tuple
    weights: tuple
    biases: tuple
    activation: str = "sigmoid"
    seed: int = 0
    train_config: dict | None = None
    loss_trace: tuple = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", tuple(_freeze(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_freeze(b) for b in self.biases))
        object.__setattr__(self, "loss_trace", tuple(float(v) for v in self.loss_trace))
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise DimensionError(f"invalid layer_dims {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise DimensionError("need exactly one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise DimensionError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} do not chain with dims {dims}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
        if self.activation != "sigmoid":
            raise ValueError("only the sigmoid activation is supported")

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    @property
    def n_parameters(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def to_dict(self):
        return {
            "version": MODEL_FORMAT_VERSION,
            "layer_dims": list(self.layer_dims),
            "weights": [w.ravel(order="C").tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "activation": self.activation,
            "train_config": self.train_config,
            "seed": self.seed,
            "loss_trace": list(self.loss_trace),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported network model version {doc.get('version')!r}")
        dims = [int(d) for d in doc["layer_dims"]]
        weights = [
            np.asarray(w, dtype=np.float64).reshape(dims[i + 1], dims[i])
            for i, w in enumerate(doc["weights"])
        ]
        return cls(
            layer_dims=tuple(dims),
            weights=tuple(weights),
            biases=tuple(np.asarray(b, dtype=np.float64) for b in doc["biases"]),
            activation=doc.get("activation", "sigmoid"),
            seed=int(doc.get("seed", 0)),
            train_config=doc.get("train_config"),
            loss_trace=tuple(doc.get("loss_trace", ())),
        )

    def save(self, path):
        # json writes floats with their shortest round-trip repr, so reloads are bit-exact
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _init_bound(fan_in, fan_out):
    return 4.0 * np.sqrt(6.0 / (fan_in + fan_out))


def _as_data(data, input_dim=None):
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] == 0:
        raise DegenerateInputError("training data is empty")
    if input_dim is not None and X.shape[1] != input_dim:
        raise DimensionError(f"data vectors have length {X.shape[1]}, expected {input_dim}")
    return X


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def dae_loss_and_gradients(weight, bias, dec_bias, x_in, x_target):
    """Tied-weight autoencoder loss ``mean_n 0.5 * ||z_n - x_n||^2`` and its gradients."""
    B = x_in.shape[0]
    h = expit(x_in @ weight.T + bias)
    z = expit(h @ weight + dec_bias)
    err = z - x_target
    loss = 0.5 * np.sum(err * err) / B
    dz = err * z * (1.0 - z)
    dh = (dz @ weight.T) * h * (1.0 - h)
    g_w = (dh.T @ x_in + h.T @ dz) / B
    return loss, g_w, dh.sum(axis=0) / B, dz.sum(axis=0) / B


def train_dae(input_dim, hidden_dim, data, cfg: TrainConfig):
    """Train one denoising autoencoder layer.

    Returns the encoder as an :class:`EncoderLayer` whose ``loss_trace`` holds
    the mean per-sample reconstruction loss of each epoch (evaluated on the
    corrupted mini-batches as they are visited, before each update).
    """
    if input_dim < 1 or hidden_dim < 1:
        raise DimensionError("layer sizes must be positive")
    X = _as_data(data, input_dim)
    rng = np.random.default_rng(cfg.seed)
    bound = _init_bound(input_dim, hidden_dim)
    W = rng.uniform(-bound, bound, size=(hidden_dim, input_dim))
    b = np.zeros(hidden_dim)
    c = np.zeros(input_dim)
    n = X.shape[0]
    trace = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in _batches(rng, n, cfg.batch_size):
            x = X[idx]
            if cfg.corruption_rate > 0:
                x_in = x * (rng.random(x.shape) >= cfg.corruption_rate)
            else:
                x_in = x
            loss, g_w, g_b, g_c = dae_loss_and_gradients(W, b, c, x_in, x)
            if not np.isfinite(loss):
                raise DivergenceError("autoencoder loss became non-finite; lower the learning rate")
            total += loss * len(idx)
            W -= cfg.learning_rate * g_w
            b -= cfg.learning_rate * g_b
            c -= cfg.learning_rate * g_c
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise DivergenceError("autoencoder loss became non-finite; lower the learning rate")
        trace.append(epoch_loss)
    return EncoderLayer(weight=W, bias=b, loss_trace=trace)


def stack_sdae(layer_dims: Sequence[int], data, cfg: TrainConfig):
    """Greedy layer-wise pre-training; layer ``i`` uses seed ``cfg.seed + i``."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise DimensionError(f"layer_dims must have >= 2 positive entries, got {dims}")
    current = _as_data(data, dims[0])
    layers = []
    for i in range(len(dims) - 1):
        layer = train_dae(dims[i], dims[i + 1], current, replace(cfg, seed=cfg.seed + i))
        layers.append(layer)
        current = layer.encode(current)
    return layers


def init_dnn_from_sdae(sdae, output_dim=1, seed=0):
    """Copy the encoders into a network and append a freshly initialised output layer."""
    if output_dim < 1:
        raise DimensionError("output_dim must be >= 1")
    if not sdae:
        raise DimensionError("need at least one encoder layer")
    for prev, nxt in zip(sdae, sdae[1:]):
        if prev.output_dim != nxt.input_dim:
            raise DimensionError("encoder layers do not chain")
    rng = np.random.default_rng(seed)
    last = sdae[-1].output_dim
    bound = _init_bound(last, output_dim)
    w_out = rng.uniform(-bound, bound, size=(output_dim, last))
    dims = [sdae[0].input_dim] + [layer.output_dim for layer in sdae] + [output_dim]
    return NetworkModel(
        layer_dims=tuple(dims),
        weights=tuple([layer.weight for layer in sdae] + [w_out]),
        biases=tuple([layer.bias for layer in sdae] + [np.zeros(output_dim)]),
        seed=seed,
    )


def _forward(weights, biases, X):
    acts = [X]
    for w, b in zip(weights, biases):
        acts.append(expit(acts[-1] @ w.T + b))
    return acts


def bce_loss_and_gradients(weights, biases, X, y):
    """Mean binary cross-entropy of a sigmoid network and gradients for every layer."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(X.shape[0], -1)
    B = X.shape[0]
    acts = [X]
    for w, b in zip(weights[:-1], biases[:-1]):
        acts.append(expit(acts[-1] @ w.T + b))
    logits = acts[-1] @ weights[-1].T + biases[-1]
    loss = float(np.sum(np.logaddexp(0.0, logits) - y * logits) / B)
    delta = (expit(logits) - y) / B
    g_w = [None] * len(weights)
    g_b = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        g_w[i] = delta.T @ acts[i]
        g_b[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ weights[i]) * acts[i] * (1.0 - acts[i])
    return loss, g_w, g_b


def _epoch_indices(rng, y, rebalance):
    if not rebalance:
        return np.arange(len(y))
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) > len(neg):
        pos = rng.choice(pos, len(neg), replace=False)
    else:
        neg = rng.choice(neg, len(pos), replace=False)
    return np.sort(np.concatenate([pos, neg]))


def train_dnn(model: NetworkModel, data, labels, cfg: TrainConfig, rebalance=False):
    """Fine-tune every layer of ``model`` with mini-batch SGD on binary cross-entropy.

    With ``rebalance`` each epoch trains on all samples of the minority class
    and an equally large random draw of the majority class, redrawn every
    epoch (the draw precedes the epoch's permutation in the RNG stream).
    """
    X = _as_data(data, model.input_dim)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise DimensionError("labels and data have different lengths")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if model.output_dim != 1:
        raise DimensionError("fine-tuning expects a single sigmoid output")
    single = np.unique(y).size < 2
    if single:
        warnings.warn("training data contains a single class", RuntimeWarning, stacklevel=2)
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for _ in range(cfg.epochs):
        subset = _epoch_indices(rng, y, rebalance and not single)
        total = 0.0
        for idx in _batches(rng, len(subset), cfg.batch_size):
            idx = subset[idx]
            loss, g_w, g_b = bce_loss_and_gradients(weights, biases, X[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergenceError("network loss became non-finite; lower the learning rate")
            total += loss * len(idx)
            for i in range(len(weights)):
                weights[i] -= cfg.learning_rate * g_w[i]
                biases[i] -= cfg.learning_rate * g_b[i]
        trace.append(total / len(subset))
    if cfg.epochs == 0:
        return model
    return NetworkModel(
        layer_dims=model.layer_dims,
        weights=tuple(weights),
        biases=tuple(biases),
        seed=model.seed,
        train_config=asdict(cfg),
        loss_trace=tuple(model.loss_trace) + tuple(trace),
    )


def train_detector(X, y, net, seed=0, rebalance=True):
    """Pre-train and fine-tune a one-output detector.

    ``net`` is any object with ``hidden_dims``, ``pretrain_lr``, ``finetune_lr``,
    ``batch_size``, ``pretrain_epochs``, ``finetune_epochs`` and
    ``corruption_rate`` attributes (see :class:`deformseg.config.NetConfig`).
    Pre-training sees one balanced random draw of the samples; fine-tuning
    redraws the balanced subset every epoch when ``rebalance`` is set. Seeds
    follow :class:`DeepClassifier`.
    """
    X = _as_data(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    pre = TrainConfig(net.pretrain_lr, net.batch_size, net.pretrain_epochs, net.corruption_rate, seed)
    fine = TrainConfig(net.finetune_lr, net.batch_size, net.finetune_epochs, 0.0, seed + 1000)
    draw = _epoch_indices(np.random.default_rng(seed + 2000), y, rebalance and np.unique(y).size == 2)
    sdae = stack_sdae([X.shape[1], *net.hidden_dims], X[draw], pre)
    model = init_dnn_from_sdae(sdae, 1, seed=seed + 500)
    return train_dnn(model, X, y, fine, rebalance=rebalance)


def dnn_logit(model: NetworkModel, X):
    """Pre-activation of the output unit; monotone in the score and never saturates."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.shape[1] != model.input_dim:
        raise DimensionError(f"input has length {X2.shape[1]}, network expects {model.input_dim}")
    acts = _forward(model.weights[:-1], model.biases[:-1], X2)
    logits = acts[-1] @ model.weights[-1].T + model.biases[-1]
    if model.output_dim == 1:
        logits = logits[:, 0]
    return logits[0] if single else logits


def dnn_forward(model: NetworkModel, X):
    """Network output(s) for one vector or a batch of row vectors."""
    return expit(dnn_logit(model, X))


def dnn_score(model: NetworkModel, x):
    """Probability-like score in (0, 1) for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("dnn_score takes a single input vector")
    out = dnn_forward(model, x)
    # keep the open interval even where float64 saturates
    return float(np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)))


class DeepClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier: SdAE pre-training followed by supervised fine-tuning.

    Parameters
    ----------
    hidden_dims : tuple of int
        Widths of the pre-trained hidden layers.
    pretrain_lr, finetune_lr : float
        SGD learning rates of the two phases.
    batch_size : int
    pretrain_epochs, finetune_epochs : int
    corruption_rate : float
        Fraction of inputs zeroed by the masking noise during pre-training.
    random_state : int
    """

    def __init__(self, hidden_dims=(800, 400), pretrain_lr=0.001, finetune_lr=0.1,
                 batch_size=1000, pretrain_epochs=100, finetune_epochs=100,
                 corruption_rate=0.25, random_state=0):
        self.hidden_dims = hidden_dims
        self.pretrain_lr = pretrain_lr
        self.finetune_lr = finetune_lr
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.corruption_rate = corruption_rate
        self.random_state = random_state

    def fit(self, X, y):
        X = _as_data(X)
        y = np.asarray(y).reshape(-1)
        classes = np.unique(y)
        if classes.size < 2:
            raise DegenerateInputError("training data contains a single class")
        if classes.size > 2:
            raise ValueError("DeepClassifier is binary")
        self.classes_ = classes
        seed = int(self.random_state or 0)
        pre = TrainConfig(self.pretrain_lr, self.batch_size, self.pretrain_epochs,
                          self.corruption_rate, seed)
        fine = TrainConfig(self.finetune_lr, self.batch_size, self.finetune_epochs, 0.0,
                           seed + 1000)
        sdae = stack_sdae([X.shape[1], *self.hidden_dims], X, pre)
        model = init_dnn_from_sdae(sdae, 1, seed=seed + 500)
        self.pretrain_loss_ = [layer.loss_trace for layer in sdae]
        self.model_ = train_dnn(model, X, (y == classes[1]).astype(float), fine)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return np.atleast_1d(dnn_logit(self.model_, X))

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]
