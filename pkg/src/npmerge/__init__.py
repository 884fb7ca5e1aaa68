"""Model merging with learned per-parameter interpolation coefficients."""
from .align import (PermutationSet, align, align_permute, align_weight_matching, apply_alignment,
                    collect_activations, cross_correlation)
from .checkpoint import load_model, save_model
from .data import (LabeledDataset, load_idx, split_dirichlet, split_eighty_twenty, subsample_per_class,
                   synth_blobs)
from .merge import (MergeConfig, MergeReport, barrier, ensemble_eval, finetune, np_compose, np_optimize,
                    uniform_merge)
from .multimerge import MergeTree, all_to_one_average, pairwise_merge_tree
from .nn import (MlpSpec, ModelParams, TrainConfig, backward, bn_reset, evaluate, forward, init_params,
                 loss_xent, train_model)
from .numerics import lap_solve, sigmoid

__version__ = "0.1.0"
