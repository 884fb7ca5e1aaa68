"""
Aligning two networks neuron by neuron
======================================

Hidden units of an MLP can be reordered without changing what the network
computes. Two independently trained networks therefore rarely agree on
which unit is which, and averaging them directly mixes unrelated features.
This demo plants a known shuffle and recovers it two ways.
"""

import numpy as np

from npmerge import (MlpSpec, PermutationSet, TrainConfig, align_permute, align_weight_matching,
                     apply_alignment, forward, lap_solve, synth_blobs, train_model)

# A tiny assignment problem first: rows are workers, columns are jobs.
cost = np.array([[4.0, 1.0, 3.0],
                 [2.0, 0.0, 5.0],
                 [3.0, 2.0, 2.0]])
mapping, total = lap_solve(cost)
print("assignment", mapping.tolist(), "cost", total)

# Train a small network on clustered data.
data = synth_blobs(4, 150, 8, 0.7, seed=0, clusters_per_class=2)
model, _ = train_model(MlpSpec((8, 32, 32, 4)), data, TrainConfig(epochs=15, seed=1))

# Shuffle its hidden units. The function is untouched...
rng = np.random.default_rng(7)
planted = PermutationSet([rng.permutation(32), rng.permutation(32)])
shuffled = apply_alignment(model, planted)
x = data.features[:64]
print("max logit change after shuffling:", np.abs(forward(shuffled, x)[0] - forward(model, x)[0]).max())

# ...but the weights now look nothing alike. Both matchers undo the shuffle.
by_activation = align_permute(model, shuffled, data)
by_weights = align_weight_matching(model, shuffled)
print("activation matching recovers it:", by_activation == planted.inverse())
print("weight matching recovers it:   ", by_weights == planted.inverse())
