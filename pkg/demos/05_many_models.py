"""
Merging more than two models
============================

Eight models start from one initialization and train on disjoint shards.
The merge tree pairs them up at random, merges each pair, and repeats until
one model is left. The baseline aligns everyone to model 0 and averages.
"""

import numpy as np

from npmerge import (MergeConfig, MlpSpec, TrainConfig, all_to_one_average, evaluate, init_params,
                     pairwise_merge_tree, synth_blobs, train_model)

data = synth_blobs(10, 400, 32, 1.0, seed=100, clusters_per_class=4)
order = np.random.default_rng(0).permutation(len(data))
train, test = data.subset(order[:3000]), data.subset(order[3000:])

spec = MlpSpec((32, 128, 128, 10), (True, True))
init = init_params(spec, 1000)
shards = np.array_split(np.random.default_rng(0).permutation(len(train)), 8)
models = [train_model(spec, train.subset(s), TrainConfig(seed=j), init=init)[0] for j, s in enumerate(shards)]
print("single-shard accuracy:", [round(evaluate(m, test)[0], 3) for m in models])

for m in (2, 4, 8):
    merged, tree, reports = pairwise_merge_tree(models[:m], train, MergeConfig(seed=0), seed=0)
    avg = all_to_one_average(models[:m], train)
    print(f"m={m}: tree {evaluate(merged, test)[0]:.3f}  all-to-one {evaluate(avg, test)[0]:.3f}  "
          f"rounds {tree.rounds}")
