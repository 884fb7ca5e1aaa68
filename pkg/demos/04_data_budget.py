"""
How much data does merging need?
================================

Each learned coefficient can only slide its parameter between two fixed
endpoints, so the merge has far less room to overfit than fine-tuning.
Here we shrink the optimization set to k examples per class and compare
against fine-tuning the aligned average on the same examples.
"""

import numpy as np

from npmerge import (MergeConfig, MlpSpec, TrainConfig, align_permute, apply_alignment, bn_reset, evaluate,
                     finetune, np_optimize, split_dirichlet, subsample_per_class, synth_blobs,
                     train_model, uniform_merge)

data = synth_blobs(10, 400, 32, 1.0, seed=100, clusters_per_class=4)
order = np.random.default_rng(0).permutation(len(data))
train, test = data.subset(order[:3000]), data.subset(order[3000:])
part_a, part_b = split_dirichlet(train, (0.5, 0.5), seed=1)

spec = MlpSpec((32, 128, 128, 10), (True, True))
a, _ = train_model(spec, part_a, TrainConfig(seed=3))
b, _ = train_model(spec, part_b, TrainConfig(seed=4))

print("budget     NP      fine-tune")
for k in (None, 100, 10, 5, 1):
    opt = train if k is None else subsample_per_class(train, k, seed=0)
    bp = apply_alignment(b, align_permute(a, b, opt))
    cfg = MergeConfig(seed=0)
    _, _, report = np_optimize(a, bp, opt, cfg, eval_data=test)
    tuned = finetune(bn_reset(uniform_merge(a, bp), opt), opt, cfg)
    label = "full" if k is None else f"{k}/class"
    print(f"{label:9s} {100 * report.acc:6.2f}  {100 * evaluate(tuned, test)[0]:6.2f}")
