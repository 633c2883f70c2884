"""Background-aware moment detection for video moment retrieval, trainable on CPU."""

from .autodiff import Tensor, backward, grad_check
from .data import GroundingDataset, SyntheticSpec, generate_synthetic
from .metrics import EvalResult, evaluate_predictions
from .model import ModelConfig, MomentDetector
from .temporal import Span, giou, iou
from .training import LossWeights, TrainConfig, Trainer, evaluate

__version__ = "0.1.0"

__all__ = [
    "EvalResult",
    "GroundingDataset",
    "LossWeights",
    "ModelConfig",
    "MomentDetector",
    "Span",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "backward",
    "evaluate",
    "evaluate_predictions",
    "generate_synthetic",
    "giou",
    "grad_check",
    "iou",
]
