"""Aggregation of two aligned models.

``np_optimize`` learns one pre-sigmoid coefficient per trainable scalar. The
merged tensor is ``s * W_A + (1 - s) * W_B`` with ``s = sigmoid(alpha_pre)``;
the endpoints stay frozen and only ``alpha_pre`` is updated by Adam.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import (Adam, ModelParams, TrainConfig, backward, bn_reset, evaluate, fit,
                 forward, iterate_minibatches, loss_xent, predict)
from .numerics import DimensionError, make_rng, sigmoid, sigmoid_grad

AlphaSet = dict  # name -> alpha_pre array, keyed like ModelParams.trainable()


class InvariantViolation(AssertionError):
    pass


@dataclass
class MergeConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    alpha_init: float = 0.5
    seed: int = 0
    bn_reset_batch_size: int = 256
    check_invariants: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not 0 < self.alpha_init < 1:
            raise ValueError("alpha_init must lie in (0, 1)")
        if self.optimizer != "adam":
            raise ValueError("coefficient learning uses adam")

    def train_config(self) -> TrainConfig:
        return TrainConfig("adam", self.learning_rate, self.epochs, self.batch_size, self.seed)


@dataclass
class MergeReport:
    method: str
    prior: str
    seed: int = 0
    opt_budget: str = "full"
    acc: float | None = None
    loss: float | None = None
    pre_acc: float | None = None
    post_acc: float | None = None
    loss_curve: list[float] = field(default_factory=list)
    alpha_mean: float | None = None
    alpha_std: float | None = None
    alpha_frac_mid: float | None = None
    invariant_violations: int = 0
    num_models: int = 2
    config_hash: str = ""
    wall_time: float = 0.0

    CSV_COLUMNS = ("method", "prior", "seed", "opt_budget", "acc", "loss", "alpha_mean", "alpha_std")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MergeReport":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def csv_row(self) -> list:
        return [getattr(self, c) for c in self.CSV_COLUMNS]


def _check_congruent(*models: ModelParams) -> None:
    for m in models[1:]:
        if m.spec != models[0].spec:
            raise DimensionError(f"models are not congruent: {models[0].spec} vs {m.spec}")


# ---------------------------------------------------------------- uniform


def uniform_merge(a: ModelParams, b: ModelParams, alpha: float = 0.5) -> ModelParams:
    """``alpha * A + (1 - alpha) * B`` for every tensor, BN running stats included."""
    _check_congruent(a, b)
    sb = dict(b.tensors())
    return a.with_tensors({k: _lerp(v, sb[k], alpha) for k, v in a.tensors()})


def _lerp(x, y, s):
    """``s*x + (1-s)*y`` clipped to the closed interval spanned by ``x`` and ``y``."""
    out = s * x + (1.0 - s) * y
    return np.clip(out, np.minimum(x, y), np.maximum(x, y))


def average_models(models: list[ModelParams]) -> ModelParams:
    _check_congruent(*models)
    mean = {k: v.copy() for k, v in models[0].tensors()}
    # running mean: exact when all models agree
    for n, m in enumerate(models[1:], start=2):
        for k, v in m.tensors():
            mean[k] += (v - mean[k]) / n
    return models[0].with_tensors(mean)


# ----------------------------------------------------------------- NP merge


def init_alphas(model: ModelParams, alpha_init: float = 0.5) -> AlphaSet:
    pre = float(np.log(alpha_init) - np.log1p(-alpha_init))
    return {k: np.full(v.shape, pre) for k, v in model.trainable()}


def np_compose(a: ModelParams, b: ModelParams, alphas: AlphaSet) -> ModelParams:
    """Per-entry convex combination with coefficients ``sigmoid(alpha_pre)``.

    BatchNorm running statistics carry no coefficient; they are averaged and
    are expected to be recomputed with ``bn_reset``.
    """
    _check_congruent(a, b)
    sb = dict(b.tensors())
    merged = {}
    for k, va in a.tensors():
        if k in alphas:
            pre = alphas[k]
            if pre.shape != va.shape:
                raise DimensionError(f"{k}: coefficient shape {pre.shape} != {va.shape}")
            s = sigmoid(pre)
            merged[k] = np.clip(s * va + sigmoid(-pre) * sb[k],
                                np.minimum(va, sb[k]), np.maximum(va, sb[k]))
        else:
            merged[k] = 0.5 * (va + sb[k])
    return a.with_tensors(merged)


def alpha_gradients(a: ModelParams, b: ModelParams, alphas: AlphaSet,
                    merged_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Chain rule from merged-tensor gradients to ``alpha_pre`` gradients."""
    sa, sb = dict(a.trainable()), dict(b.trainable())
    return {k: merged_grads[k] * (sa[k] - sb[k]) * sigmoid_grad(alphas[k]) for k in alphas}


def np_loss_and_grad(a: ModelParams, b: ModelParams, alphas: AlphaSet, x, y):
    """Train-mode loss of the composed model and its gradient in ``alpha_pre``."""
    merged = np_compose(a, b, alphas)
    logits, cache = forward(merged, x, train=True, update_stats=False)
    loss, g = loss_xent(logits, y)
    return loss, alpha_gradients(a, b, alphas, backward(merged, cache, g))


def alpha_summary(alphas: AlphaSet) -> tuple[float, float, float]:
    s = np.concatenate([sigmoid(v).ravel() for v in alphas.values()])
    return float(s.mean()), float(s.std()), float(((s >= 0.4) & (s <= 0.6)).mean())


def _check_step(a, b, alphas, merged) -> int:
    bad = 0
    sa, sb = dict(a.trainable()), dict(b.trainable())
    for k, v in merged.trainable():
        lo, hi = np.minimum(sa[k], sb[k]), np.maximum(sa[k], sb[k])
        bad += int(np.count_nonzero((v < lo) | (v > hi)))
    for pre in alphas.values():
        s = sigmoid(pre)
        bad += int(np.count_nonzero(~np.isfinite(pre) | (s <= 0.0) | (s >= 1.0)))
    return bad


def _frozen(model: ModelParams) -> list:
    arrays = [v for _, v in model.tensors()]
    flags = [v.flags.writeable for v in arrays]
    for v in arrays:
        v.flags.writeable = False
    return list(zip(arrays, flags))


def _thaw(saved: list) -> None:
    # reverse order so an array frozen twice ends with its original flag
    for v, flag in reversed(saved):
        v.flags.writeable = flag


def np_optimize(a: ModelParams, b: ModelParams, opt_data, cfg: MergeConfig | None = None,
                eval_data=None, prior: str = "permute",
                budget: str = "full") -> tuple[AlphaSet, ModelParams, MergeReport]:
    """Learn per-parameter interpolation coefficients between ``a`` and ``b``.

    Each step composes the merged model, runs a train-mode forward on a
    minibatch of ``opt_data``, backpropagates to the merged tensors and maps
    that gradient onto ``alpha_pre``. BatchNorm statistics are recomputed on
    ``opt_data`` once, after the last epoch. Both endpoints are made read-only
    for the duration, so any write to them raises.
    """
    cfg = cfg or MergeConfig()
    _check_congruent(a, b)
    if len(opt_data) == 0:
        raise ValueError("optimization data is empty")
    start = time.perf_counter()
    x, y = opt_data.features, opt_data.labels
    alphas = init_alphas(a, cfg.alpha_init)
    opt = Adam(cfg.learning_rate)
    rng = make_rng(cfg.seed)
    report = MergeReport("np", prior, cfg.seed, budget)
    snapshot = [v.copy() for m in (a, b) for _, v in m.tensors()]
    saved = _frozen(a) + _frozen(b)
    try:
        if eval_data is not None:
            report.pre_acc = evaluate(_finish(np_compose(a, b, alphas), opt_data, cfg), eval_data)[0]
        for _ in range(cfg.epochs):
            total, seen = 0.0, 0
            for idx in iterate_minibatches(len(x), cfg.batch_size, rng):
                if len(idx) < 2 and a.has_batchnorm():
                    continue
                merged = np_compose(a, b, alphas)
                if cfg.check_invariants:
                    report.invariant_violations += _check_step(a, b, alphas, merged)
                logits, cache = forward(merged, x[idx], train=True, update_stats=False)
                loss, g = loss_xent(logits, y[idx])
                grads = alpha_gradients(a, b, alphas, backward(merged, cache, g))
                opt.step(alphas, grads)
                total += loss * len(idx)
                seen += len(idx)
            report.loss_curve.append(total / max(seen, 1))
        merged = np_compose(a, b, alphas)
        if cfg.check_invariants:
            report.invariant_violations += _check_step(a, b, alphas, merged)
    finally:
        _thaw(saved)
    after = [v for m in (a, b) for _, v in m.tensors()]
    if cfg.check_invariants and not all(np.array_equal(p, q) for p, q in zip(snapshot, after)):
        report.invariant_violations += 1
    merged = _finish(merged, opt_data, cfg)
    report.alpha_mean, report.alpha_std, report.alpha_frac_mid = alpha_summary(alphas)
    if eval_data is not None:
        report.post_acc, report.loss = evaluate(merged, eval_data)
        report.acc = report.post_acc
    report.wall_time = time.perf_counter() - start
    return alphas, merged, report


def _finish(model: ModelParams, data, cfg: MergeConfig) -> ModelParams:
    if model.has_batchnorm():
        return bn_reset(model, data, cfg.bn_reset_batch_size)
    return model


# ------------------------------------------------------------- baselines


def finetune(model: ModelParams, opt_data, cfg: MergeConfig | None = None) -> ModelParams:
    """Train every parameter of ``model`` with the same budget as ``np_optimize``."""
    cfg = cfg or MergeConfig()
    if cfg.epochs == 0:
        return model.copy()
    return fit(model, opt_data.features, opt_data.labels, cfg.train_config())[0]


def ensemble_logits(models: list[ModelParams], x) -> np.ndarray:
    if not models:
        raise ValueError("ensemble needs at least one model")
    return sum(predict(m, x) for m in models) / len(models)


def ensemble_eval(models: list[ModelParams], dataset) -> float:
    """Accuracy of the argmax of the mean logits."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    if len({m.spec.num_classes for m in models}) != 1:
        raise DimensionError("ensemble members disagree on the number of classes")
    z = ensemble_logits(models, dataset.features)
    return float((z.argmax(axis=1) == dataset.labels).mean())


@dataclass
class BarrierResult:
    alphas: list[float]
    losses: list[float]
    accuracies: list[float]
    loss_barrier: float
    acc_barrier: float
    max_loss: float
    min_acc: float


def barrier(a: ModelParams, b: ModelParams, dataset, num_points: int = 11,
            bn_data=None, batch_size: int = 256) -> BarrierResult:
    """Loss and accuracy along ``uniform_merge(a, b, t)`` for evenly spaced ``t``.

    ``t`` runs from 0 (model ``b``) to 1 (model ``a``). The loss barrier is the
    worst loss minus the worse endpoint loss; the accuracy barrier is the
    worse endpoint accuracy minus the worst accuracy. Models with BatchNorm are
    reset on ``bn_data`` (default: ``dataset``) at every point.
    """
    if num_points < 3:
        raise ValueError("num_points must be at least 3")
    _check_congruent(a, b)
    ref = dataset if bn_data is None else bn_data
    ts = np.linspace(0.0, 1.0, num_points)
    losses, accs = [], []
    for t in ts:
        m = uniform_merge(a, b, float(t))
        if m.has_batchnorm():
            m = bn_reset(m, ref, batch_size)
        acc, loss = evaluate(m, dataset)
        losses.append(loss)
        accs.append(acc)
    max_loss, min_acc = max(losses), min(accs)
    return BarrierResult(ts.tolist(), losses, accs,
                         max_loss - max(losses[0], losses[-1]),
                         min(accs[0], accs[-1]) - min_acc, max_loss, min_acc)
