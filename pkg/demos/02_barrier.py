"""
Walking the line between two models
===================================

Linear interpolation between two trained networks usually passes through
a region of high loss. After aligning the second network to the first the
path is much flatter, which is what makes weight averaging work at all.
"""

import numpy as np

from npmerge import MlpSpec, TrainConfig, align_permute, apply_alignment, barrier, synth_blobs, train_model

data = synth_blobs(5, 200, 12, 0.8, seed=3, clusters_per_class=3)
order = np.random.default_rng(0).permutation(len(data))
train, test = data.subset(order[:800]), data.subset(order[800:])

spec = MlpSpec((12, 64, 64, 5))
a, _ = train_model(spec, train, TrainConfig(epochs=20, seed=1))
b, _ = train_model(spec, train, TrainConfig(epochs=20, seed=2))

raw = barrier(a, b, test, num_points=11)
aligned = barrier(a, apply_alignment(b, align_permute(a, b, train)), test, num_points=11)

# t = 0 is model b, t = 1 is model a
print(" t     acc(raw)  acc(aligned)")
for t, r, s in zip(raw.alphas, raw.accuracies, aligned.accuracies):
    print(f"{t:.1f}   {r:.3f}     {s:.3f}")
print(f"accuracy barrier: raw {raw.acc_barrier:.3f}, aligned {aligned.acc_barrier:.3f}")
print(f"loss barrier:     raw {raw.loss_barrier:.3f}, aligned {aligned.loss_barrier:.3f}")
