"""selfsal: self-supervised salient object detection.

Trains a dual-encoder saliency network with no human labels by fusing
class activation maps with gated image edges into pseudo ground truth,
alongside student-teacher distillation and patch-wise contrastive
learning.
"""

from .model import ArchConfig, BaseNetwork, build_model, clone_as_teacher
from .trainer import TrainConfig, TrainReport, Trainer, run_training

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "BaseNetwork",
    "build_model",
    "clone_as_teacher",
    "TrainConfig",
    "TrainReport",
    "Trainer",
    "run_training",
    "__version__",
]
