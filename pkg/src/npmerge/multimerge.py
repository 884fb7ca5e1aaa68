"""Merging more than two models."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .align import align_permute, apply_alignment
from .merge import MergeConfig, MergeReport, average_models, np_optimize
from .nn import ModelParams, bn_reset
from .numerics import make_rng


@dataclass
class TreeNode:
    id: int
    round: int = 0
    left: int | None = None
    right: int | None = None
    method: str = "leaf"
    seed: int | None = None
    checkpoint: str | None = None


@dataclass
class MergeTree:
    """Leaves ``0..m-1`` are the input models; internal nodes follow in merge order."""
    nodes: list[TreeNode] = field(default_factory=list)
    rounds: list[list[list[int]]] = field(default_factory=list)

    @property
    def num_leaves(self) -> int:
        return sum(1 for n in self.nodes if n.method == "leaf")

    @property
    def root(self) -> TreeNode:
        return self.nodes[-1]

    def leaves_under(self, node_id: int) -> list[int]:
        node = self.nodes[node_id]
        if node.method == "leaf":
            return [node.id]
        return self.leaves_under(node.left) + self.leaves_under(node.right)

    def to_json(self) -> str:
        return json.dumps({"nodes": [asdict(n) for n in self.nodes], "rounds": self.rounds}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MergeTree":
        doc = json.loads(text)
        return cls([TreeNode(**n) for n in doc["nodes"]], doc["rounds"])


def _check_models(models: list[ModelParams]) -> None:
    if len(models) < 2:
        raise ValueError("need at least two models")
    for m in models[1:]:
        if m.spec != models[0].spec:
            raise ValueError("all models must share one architecture")


def merge_pair(a: ModelParams, b: ModelParams, opt_data, cfg: MergeConfig,
               eval_data=None) -> tuple[ModelParams, MergeReport]:
    """Permute-align ``b`` onto ``a`` on the optimization data, then NP-merge."""
    b_aligned = apply_alignment(b, align_permute(a, b, opt_data))
    _, merged, report = np_optimize(a, b_aligned, opt_data, cfg, eval_data=eval_data)
    return merged, report


def pairwise_merge_tree(models: list[ModelParams], opt_data, cfg: MergeConfig | None = None,
                        seed: int = 0, eval_data=None) -> tuple[ModelParams, MergeTree, list[MergeReport]]:
    """Merge by rounds of random pairing until a single model remains.

    Each round shuffles the surviving models with a generator seeded by
    ``seed`` and pairs neighbours; the lower node id of a pair is the
    reference model. With an odd count the last model in the shuffled order
    passes to the next round untouched.
    """
    cfg = cfg or MergeConfig()
    _check_models(models)
    rng = make_rng(seed)
    tree = MergeTree([TreeNode(i) for i in range(len(models))])
    current = list(range(len(models)))
    store = dict(enumerate(models))
    reports = []
    rnd = 0
    while len(current) > 1:
        rnd += 1
        order = [current[i] for i in rng.permutation(len(current))]
        pairs = [sorted(order[i:i + 2]) for i in range(0, len(order) - 1, 2)]
        carry = [order[-1]] if len(order) % 2 else []
        tree.rounds.append([list(p) for p in pairs] + ([carry] if carry else []))
        nxt = []
        for left, right in pairs:
            merged, report = merge_pair(store[left], store[right], opt_data, cfg, eval_data)
            node = TreeNode(len(tree.nodes), rnd, left, right, "np-permute", cfg.seed)
            tree.nodes.append(node)
            store[node.id] = merged
            reports.append(report)
            nxt.append(node.id)
        current = nxt + carry
    return store[current[0]], tree, reports


def all_to_one_average(models: list[ModelParams], probe, reference_index: int = 0,
                       with_bn_reset: bool = True, batch_size: int = 1024) -> ModelParams:
    """Permute-align every model to the reference and average all of them equally."""
    _check_models(models)
    if not 0 <= reference_index < len(models):
        raise ValueError(f"reference index {reference_index} out of range for {len(models)} models")
    ref = models[reference_index]
    aligned = [m if i == reference_index else apply_alignment(m, align_permute(ref, m, probe, batch_size))
               for i, m in enumerate(models)]
    out = average_models(aligned)
    if with_bn_reset and out.has_batchnorm():
        out = bn_reset(out, probe)
    return out
