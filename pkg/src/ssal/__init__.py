"""Self-supervised autogenous learning at desk scale.

Builds classifiers with auxiliary group-label branches: a confusion matrix
from a pre-trained baseline drives a balanced clustering of the original
classes, each resulting group mapping gets its own branch on a shared trunk,
and training/prediction combine the main and branch outputs.
"""

from .grouping import (ConfusionMatrix, DistanceMatrix, GroupMapping,
                       GroupingConfig, balanced_greedy_cluster,
                       compose_triplets, confusion_from_predictions,
                       distance_matrix)
from .model import AuxBranchSpec, NetworkArch, SSALNetwork, TrunkSpec, \
    build_network, variant_no_ssal
from .optim import SGD, TriangularSchedule, lr_at
from .prediction import CombinerConfig, fit_linear_combiner, \
    joint_probability, predict
from .tensor import Tensor, backward, cross_entropy, softmax
from .training import (BranchPlan, LossWeights, TrainConfig, joint_loss,
                       train, two_phase_pipeline)

__version__ = "0.1.0"

__all__ = [
    "AuxBranchSpec", "BranchPlan", "CombinerConfig", "ConfusionMatrix",
    "DistanceMatrix", "GroupMapping", "GroupingConfig", "LossWeights",
    "NetworkArch", "SGD", "SSALNetwork", "Tensor", "TrainConfig",
    "TriangularSchedule", "TrunkSpec", "backward", "balanced_greedy_cluster",
    "build_network", "compose_triplets", "confusion_from_predictions",
    "cross_entropy", "distance_matrix", "fit_linear_combiner",
    "joint_loss", "joint_probability", "lr_at", "predict", "softmax",
    "train", "two_phase_pipeline", "variant_no_ssal",
]
