"""Multi-layer perceptrons with optional BatchNorm, written against numpy.

A model is a :class:`ModelParams`: a list of :class:`Layer` objects, each a
linear map ``x -> W x + b``, followed on hidden layers by an optional
BatchNorm over the pre-activation and a ReLU. Gradients, optimizer moments and
merge coefficients are all ``dict[str, ndarray]`` keyed by the names yielded
from :meth:`ModelParams.trainable`.
"""
from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .numerics import DimensionError, make_rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class StateError(RuntimeError):
    """A forward cache does not belong to the parameters it is used with."""


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    batchnorm: tuple[bool, ...] = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError("an MLP needs an input, at least one hidden and an output width")
        if min(widths) < 1:
            raise ValueError("layer widths must be positive")
        bn = tuple(bool(b) for b in self.batchnorm) or (False,) * self.num_hidden
        if len(bn) != self.num_hidden:
            raise ValueError(f"expected {self.num_hidden} batchnorm flags, got {len(bn)}")
        object.__setattr__(self, "batchnorm", bn)

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def num_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "batchnorm": list(self.batchnorm)}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), tuple(d.get("batchnorm", ())))


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    bn: BatchNorm | None = None


@dataclass
class ModelParams:
    spec: MlpSpec
    layers: list[Layer]

    def __post_init__(self):
        if len(self.layers) != self.spec.num_layers:
            raise DimensionError("layer count does not match spec")
        w = self.spec.layer_widths
        for i, layer in enumerate(self.layers):
            if layer.weight.shape != (w[i + 1], w[i]) or layer.bias.shape != (w[i + 1],):
                raise DimensionError(f"layer {i} has shapes {layer.weight.shape}, {layer.bias.shape}")
            wants_bn = i < self.spec.num_hidden and self.spec.batchnorm[i]
            if wants_bn != (layer.bn is not None):
                raise DimensionError(f"layer {i} batchnorm block disagrees with spec")

    def trainable(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``(name, array)`` for every learnable tensor, in a fixed order."""
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.weight", layer.weight
            yield f"layers.{i}.bias", layer.bias
            if layer.bn is not None:
                yield f"layers.{i}.bn.gamma", layer.bn.gamma
                yield f"layers.{i}.bn.beta", layer.bn.beta

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every stored tensor, including BatchNorm running statistics."""
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.weight", layer.weight
            yield f"layers.{i}.bias", layer.bias
            if layer.bn is not None:
                yield f"layers.{i}.bn.gamma", layer.bn.gamma
                yield f"layers.{i}.bn.beta", layer.bn.beta
                yield f"layers.{i}.bn.running_mean", layer.bn.running_mean
                yield f"layers.{i}.bn.running_var", layer.bn.running_var

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self.tensors())

    @classmethod
    def from_state(cls, spec: MlpSpec, state: dict[str, np.ndarray],
                   momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> "ModelParams":
        layers = []
        for i in range(spec.num_layers):
            bn = None
            if i < spec.num_hidden and spec.batchnorm[i]:
                bn = BatchNorm(*(np.array(state[f"layers.{i}.bn.{k}"], dtype=np.float64)
                                 for k in ("gamma", "beta", "running_mean", "running_var")),
                               momentum=momentum, eps=eps)
            layers.append(Layer(np.array(state[f"layers.{i}.weight"], dtype=np.float64),
                                np.array(state[f"layers.{i}.bias"], dtype=np.float64), bn))
        return cls(spec, layers)

    def with_tensors(self, state: dict[str, np.ndarray]) -> "ModelParams":
        """Copy of this model with some tensors replaced by name."""
        full = {k: v.copy() for k, v in self.tensors()}
        for k, v in state.items():
            if k not in full:
                raise KeyError(k)
            if np.shape(v) != full[k].shape:
                raise DimensionError(f"{k}: shape {np.shape(v)} != {full[k].shape}")
            full[k] = np.array(v, dtype=np.float64)
        return ModelParams.from_state(self.spec, full, *self._bn_consts())

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def has_batchnorm(self) -> bool:
        return any(self.spec.batchnorm)

    def num_parameters(self) -> int:
        return sum(v.size for _, v in self.trainable())

    def _bn_consts(self) -> tuple[float, float]:
        for layer in self.layers:
            if layer.bn is not None:
                return layer.bn.momentum, layer.bn.eps
        return BN_MOMENTUM, BN_EPS


def same_architecture(a: ModelParams, b: ModelParams) -> bool:
    return a.spec == b.spec


def init_params(spec: MlpSpec, seed: int) -> ModelParams:
    """He-style init: weights ~ N(0, 2/fan_in), zero biases, identity BatchNorm."""
    rng = make_rng(seed)
    layers = []
    w = spec.layer_widths
    for i in range(spec.num_layers):
        weight = rng.standard_normal((w[i + 1], w[i])) * np.sqrt(2.0 / w[i])
        bn = None
        if i < spec.num_hidden and spec.batchnorm[i]:
            n = w[i + 1]
            bn = BatchNorm(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n))
        layers.append(Layer(weight, np.zeros(w[i + 1]), bn))
    return ModelParams(spec, layers)


# --------------------------------------------------------------- forward pass


@dataclass
class LayerCache:
    inputs: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    xhat: np.ndarray | None = None
    batch_var: np.ndarray | None = None
    # output of BN affine (input to ReLU); ``pre`` when BN is absent
    act_in: np.ndarray | None = None


@dataclass
class ForwardCache:
    layers: list[LayerCache] = field(default_factory=list)
    spec: MlpSpec | None = None


def forward(params: ModelParams, x, train: bool = False,
            update_stats: bool = True) -> tuple[np.ndarray, ForwardCache | None]:
    """Run the network on a batch.

    Eval mode normalizes with the running statistics and has no side effects.
    Train mode normalizes with the (biased) batch statistics, returns a cache
    for :func:`backward` and, if ``update_stats``, folds the batch statistics
    into the running ones in place with the layer's momentum.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.spec.layer_widths[0]:
        raise DimensionError(f"input of shape {h.shape} for input width {params.spec.layer_widths[0]}")
    cache = ForwardCache(spec=params.spec) if train else None
    last = params.spec.num_layers - 1
    for i, layer in enumerate(params.layers):
        z = h @ layer.weight.T + layer.bias
        xhat = var = None
        a = z
        if layer.bn is not None:
            bn = layer.bn
            if train:
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    bn.running_mean *= 1.0 - bn.momentum
                    bn.running_mean += bn.momentum * mean
                    bn.running_var *= 1.0 - bn.momentum
                    bn.running_var += bn.momentum * var
            else:
                mean, var = bn.running_mean, bn.running_var
            xhat = (z - mean) / np.sqrt(var + bn.eps)
            a = bn.gamma * xhat + bn.beta
        out = a if i == last else np.maximum(a, 0.0)
        if cache is not None:
            cache.layers.append(LayerCache(h, z, out, xhat, var, a))
        h = out
    return h, cache


def predict(params: ModelParams, x, batch_size: int = 4096) -> np.ndarray:
    """Eval-mode logits, computed in chunks."""
    x = np.asarray(x, dtype=np.float64)
    chunks = [forward(params, x[s:s + batch_size])[0] for s in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0)


def loss_xent(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    n, c = z.shape
    if y.shape != (n,):
        raise DimensionError("one label per row expected")
    if n and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    loss = float(-logp[rows, y].mean())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= n
    return loss, grad


def backward(params: ModelParams, cache: ForwardCache, grad_logits) -> dict[str, np.ndarray]:
    """Gradients of the loss with respect to every trainable tensor."""
    if cache is None or cache.spec != params.spec or len(cache.layers) != len(params.layers):
        raise StateError("cache was not produced by a train-mode forward of this architecture")
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != cache.layers[-1].post.shape:
        raise StateError("gradient shape does not match cached logits")
    grads: dict[str, np.ndarray] = {}
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        layer, lc = params.layers[i], cache.layers[i]
        if i != last:
            g = g * (lc.act_in > 0)
        if layer.bn is not None:
            bn = layer.bn
            grads[f"layers.{i}.bn.gamma"] = (g * lc.xhat).sum(axis=0)
            grads[f"layers.{i}.bn.beta"] = g.sum(axis=0)
            gx = g * bn.gamma
            inv_std = 1.0 / np.sqrt(lc.batch_var + bn.eps)
            g = inv_std * (gx - gx.mean(axis=0) - lc.xhat * (gx * lc.xhat).mean(axis=0))
        grads[f"layers.{i}.weight"] = g.T @ lc.inputs
        grads[f"layers.{i}.bias"] = g.sum(axis=0)
        if i > 0:
            g = g @ layer.weight
    return {k: grads[k] for k, _ in params.trainable()}


# ----------------------------------------------------------------- optimizers


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.weight_decay < 0:
            raise ValueError("invalid training hyperparameters")


class Adam:
    """Adam with bias correction; updates arrays in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise DimensionError(f"{k}: gradient {g.shape} vs parameter {p.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr, self.weight_decay = lr, weight_decay

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            p -= self.lr * g


def make_optimizer(name: str, lr: float, weight_decay: float = 0.0):
    if name == "adam":
        return Adam(lr, weight_decay=weight_decay)
    if name == "sgd":
        return SGD(lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


# -------------------------------------------------------------- training loop


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def fit(params: ModelParams, features, labels, config: TrainConfig) -> tuple[ModelParams, list[dict]]:
    """Train a copy of ``params`` on ``(features, labels)``; the input is not modified."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if y.max() >= params.spec.num_classes:
        raise ValueError("labels exceed the model's output width")
    model = params.copy()
    opt = make_optimizer(config.optimizer, config.learning_rate, config.weight_decay)
    rng = make_rng(config.seed)
    named = dict(model.trainable())
    history = []
    for epoch in range(config.epochs):
        total_loss = 0.0
        correct = 0
        for idx in iterate_minibatches(len(x), config.batch_size, rng):
            # BatchNorm needs at least two rows to have a batch variance
            if len(idx) < 2 and model.has_batchnorm():
                continue
            logits, cache = forward(model, x[idx], train=True)
            loss, g = loss_xent(logits, y[idx])
            opt.step(named, backward(model, cache, g))
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        history.append({"epoch": epoch + 1, "train_loss": total_loss / len(x),
                        "train_acc": correct / len(x)})
    return model, history


def train_model(spec: MlpSpec, dataset, config: TrainConfig,
                init: ModelParams | None = None) -> tuple[ModelParams, list[dict]]:
    """Initialize from ``config.seed`` (or ``init``) and train on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    start = init if init is not None else init_params(spec, config.seed)
    if start.spec != spec:
        raise DimensionError("initial parameters do not match spec")
    return fit(start, dataset.features, dataset.labels, config)


def evaluate(params: ModelParams, dataset, batch_size: int = 4096) -> tuple[float, float]:
    """Accuracy (lowest-index argmax) and mean cross-entropy in eval mode."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict(params, dataset.features, batch_size)
    loss, _ = loss_xent(logits, dataset.labels)
    acc = float((logits.argmax(axis=1) == dataset.labels).mean())
    return acc, loss


def _chan_combine(n_a, mean_a, m2_a, n_b, mean_b, m2_b):
    n = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = m2_a + m2_b + delta * delta * (n_a * n_b / n)
    return n, mean, m2


def bn_reset(params: ModelParams, data, batch_size: int = 256) -> ModelParams:
    """Recompute BatchNorm running statistics exactly over ``data``.

    Layers are processed in order; each layer's statistics are the population
    mean and variance of its pre-activations with all earlier layers already
    reset, so a single-batch reset reproduces train-mode normalization. Batch
    results are merged with Chan's pairwise update, so the outcome does not
    depend on ``batch_size`` beyond rounding.
    """
    x = np.asarray(getattr(data, "features", data), dtype=np.float64)
    if len(x) == 0:
        raise ValueError("bn_reset needs data")
    if not params.has_batchnorm():
        warnings.warn("bn_reset called on a model without BatchNorm layers", stacklevel=2)
        return params.copy()
    model = params.copy()
    for target, layer in enumerate(model.layers):
        if layer.bn is None:
            continue
        count, mean, m2 = 0, np.zeros(len(layer.bias)), np.zeros(len(layer.bias))
        for s in range(0, len(x), batch_size):
            h = x[s:s + batch_size]
            for i in range(target):
                h = _eval_layer(model.layers[i], h)
            z = h @ layer.weight.T + layer.bias
            bmean = z.mean(axis=0)
            bm2 = ((z - bmean) ** 2).sum(axis=0)
            if count == 0:
                count, mean, m2 = len(z), bmean, bm2
            else:
                count, mean, m2 = _chan_combine(count, mean, m2, len(z), bmean, bm2)
        layer.bn.running_mean = mean
        layer.bn.running_var = m2 / count
    return model


def _eval_layer(layer: Layer, h: np.ndarray) -> np.ndarray:
    z = h @ layer.weight.T + layer.bias
    if layer.bn is not None:
        bn = layer.bn
        z = bn.gamma * (z - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) + bn.beta
    return np.maximum(z, 0.0)
