"""Neuron alignment of model B onto model A.

Hidden layer ``i`` of the aligned model takes its neuron ``j`` from B's neuron
``perms[i][j]``; the rows of ``W_i``, ``b_i`` and the BatchNorm vectors move
together, and the columns of ``W_{i+1}`` follow. The output layer is never
permuted.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nn import BatchNorm, Layer, ModelParams, forward
from .numerics import (DimensionError, check_permutation, identity_permutation,
                       invert_permutation, lap_solve, make_rng)


@dataclass
class PermutationSet:
    perms: list[np.ndarray]

    @classmethod
    def identity(cls, model: ModelParams) -> "PermutationSet":
        return cls([identity_permutation(n) for n in model.spec.layer_widths[1:-1]])

    def inverse(self) -> "PermutationSet":
        return PermutationSet([invert_permutation(p) for p in self.perms])

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(len(p))) for p in self.perms)

    def __eq__(self, other) -> bool:
        return (isinstance(other, PermutationSet) and len(self.perms) == len(other.perms)
                and all(np.array_equal(a, b) for a, b in zip(self.perms, other.perms)))

    def to_json(self) -> str:
        return json.dumps({"kind": "permset",
                           "layers": {str(i + 1): p.tolist() for i, p in enumerate(self.perms)}},
                          indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PermutationSet":
        doc = json.loads(text)
        layers = doc["layers"]
        return cls([check_permutation(np.array(layers[k])) for k in sorted(layers, key=int)])


def _check_pair(a: ModelParams, b: ModelParams) -> None:
    if a.spec != b.spec:
        raise ValueError(f"architecture mismatch: {a.spec} vs {b.spec}")


# -------------------------------------------------------------- activations


def collect_activations(model: ModelParams, x, batch_size: int = 1024) -> list[np.ndarray]:
    """Post-ReLU activations of every hidden layer, eval mode, as ``[N x n_i]``."""
    x = np.asarray(getattr(x, "features", x), dtype=np.float64)
    if len(x) == 0:
        raise ValueError("probe data is empty")
    if x.shape[1] != model.spec.layer_widths[0]:
        raise DimensionError(f"probe width {x.shape[1]} != input width {model.spec.layer_widths[0]}")
    hidden = model.spec.num_hidden
    out: list[list[np.ndarray]] = [[] for _ in range(hidden)]
    for s in range(0, len(x), batch_size):
        h = x[s:s + batch_size]
        for i in range(hidden):
            layer = model.layers[i]
            z = h @ layer.weight.T + layer.bias
            if layer.bn is not None:
                bn = layer.bn
                z = bn.gamma * (z - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) + bn.beta
            h = np.maximum(z, 0.0)
            out[i].append(h)
    return [np.concatenate(chunks) for chunks in out]


def cross_correlation(acts_a, acts_b) -> np.ndarray:
    """Pearson correlation between every A neuron (rows) and B neuron (columns).

    Neurons with zero variance over the probe correlate 0 with everything.
    """
    a = np.asarray(acts_a, dtype=np.float64)
    b = np.asarray(acts_b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise DimensionError("activation matrices must have the same number of rows")
    if a.shape[0] < 2:
        raise ValueError("need at least two samples to correlate")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    na[na == 0] = np.inf
    nb[nb == 0] = np.inf
    corr = (a / na).T @ (b / nb)
    return np.clip(corr, -1.0, 1.0)


def align_permute(model_a: ModelParams, model_b: ModelParams, probe,
                  batch_size: int = 1024) -> PermutationSet:
    """Per hidden layer, maximize the summed correlation of matched neurons."""
    _check_pair(model_a, model_b)
    acts_a = collect_activations(model_a, probe, batch_size)
    acts_b = collect_activations(model_b, probe, batch_size)
    perms = [lap_solve(cross_correlation(ha, hb), maximize=True)[0]
             for ha, hb in zip(acts_a, acts_b)]
    return PermutationSet(perms)


# ----------------------------------------------------------- weight matching


def _unit_vectors(layer: Layer) -> list[np.ndarray]:
    """Per-neuron vectors that move with a hidden layer's row permutation."""
    vecs = [layer.bias]
    if layer.bn is not None:
        vecs += [layer.bn.gamma, layer.bn.beta]
    return vecs


def weight_matching_objective(model_a: ModelParams, model_b: ModelParams,
                              perms: PermutationSet) -> float:
    """Sum over layers of <W_A, P W_B P_prev^T> plus the per-neuron vector terms."""
    _check_pair(model_a, model_b)
    bp = apply_alignment(model_b, perms)
    total = 0.0
    for i, (la, lb) in enumerate(zip(model_a.layers, bp.layers)):
        total += float((la.weight * lb.weight).sum())
        if i < model_a.spec.num_hidden:
            total += sum(float(u @ v) for u, v in zip(_unit_vectors(la), _unit_vectors(lb)))
    return total


def align_weight_matching(model_a: ModelParams, model_b: ModelParams, max_sweeps: int = 100,
                          seed: int = 0, history: list | None = None) -> PermutationSet:
    """Coordinate ascent over hidden-layer permutations on weight inner products.

    Each sweep visits the hidden layers in a seeded random order and re-solves
    that layer's assignment with the neighbouring permutations held fixed.
    Stops after a sweep that changes nothing. If ``history`` is given, the
    objective after every sweep is appended to it (the first entry is the
    starting identity objective).
    """
    _check_pair(model_a, model_b)
    rng = make_rng(seed)
    hidden = model_a.spec.num_hidden
    perms = [identity_permutation(n) for n in model_a.spec.layer_widths[1:-1]]
    la, lb = model_a.layers, model_b.layers
    if history is not None:
        history.append(weight_matching_objective(model_a, model_b, PermutationSet(perms)))
    for _ in range(max_sweeps):
        changed = False
        for i in rng.permutation(hidden):
            # B's incoming weights with the previous layer's permutation on columns
            w_in = lb[i].weight if i == 0 else lb[i].weight[:, perms[i - 1]]
            cost = la[i].weight @ w_in.T
            for u, v in zip(_unit_vectors(la[i]), _unit_vectors(lb[i])):
                cost += np.outer(u, v)
            nxt = lb[i + 1].weight
            if i + 1 < hidden:
                nxt = nxt[perms[i + 1]]
            cost += la[i + 1].weight.T @ nxt
            n = len(perms[i])
            new, new_val = lap_solve(cost, maximize=True)
            old_val = float(cost[np.arange(n), perms[i]].sum())
            # only accept strict improvements so ties cannot cycle
            if new_val > old_val + 1e-12 * max(1.0, abs(old_val)) and not np.array_equal(new, perms[i]):
                perms[i] = new
                changed = True
        if history is not None:
            history.append(weight_matching_objective(model_a, model_b, PermutationSet(perms)))
        if not changed:
            break
    return PermutationSet(perms)


# ---------------------------------------------------------------- applying


def apply_alignment(model_b: ModelParams, perms: PermutationSet) -> ModelParams:
    """Functionally equivalent copy of ``model_b`` with hidden neurons reordered."""
    spec = model_b.spec
    if len(perms.perms) != spec.num_hidden:
        raise DimensionError(f"{len(perms.perms)} permutations for {spec.num_hidden} hidden layers")
    for p, n in zip(perms.perms, spec.layer_widths[1:-1]):
        if len(p) != n:
            raise DimensionError(f"permutation of length {len(p)} for a layer of width {n}")
    layers = []
    for i, layer in enumerate(model_b.layers):
        w = layer.weight
        b = layer.bias
        bn = layer.bn
        if i > 0:
            w = w[:, perms.perms[i - 1]]
        if i < spec.num_hidden:
            p = perms.perms[i]
            w, b = w[p], b[p]
            if bn is not None:
                bn = BatchNorm(bn.gamma[p], bn.beta[p], bn.running_mean[p], bn.running_var[p],
                               bn.momentum, bn.eps)
        layers.append(Layer(w.copy(), b.copy(),
                            None if bn is None else BatchNorm(bn.gamma.copy(), bn.beta.copy(),
                                                              bn.running_mean.copy(), bn.running_var.copy(),
                                                              bn.momentum, bn.eps)))
    return ModelParams(spec, layers)


def align(model_a: ModelParams, model_b: ModelParams, method: str, probe=None,
          batch_size: int = 1024, seed: int = 0, max_sweeps: int = 100) -> PermutationSet:
    """Dispatch on ``none``, ``permute`` or ``weight_matching``."""
    _check_pair(model_a, model_b)
    if method == "none":
        return PermutationSet.identity(model_b)
    if method == "permute":
        if probe is None:
            raise ValueError("permute alignment needs probe data")
        return align_permute(model_a, model_b, probe, batch_size)
    if method == "weight_matching":
        return align_weight_matching(model_a, model_b, max_sweeps, seed)
    raise ValueError(f"unknown alignment method {method!r}")


def max_logit_gap(m1: ModelParams, m2: ModelParams, x) -> float:
    return float(np.abs(forward(m1, x)[0] - forward(m2, x)[0]).max())
