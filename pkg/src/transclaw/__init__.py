"""Claw-skip hybrid convolutional/transformer segmentation network with its
own reverse-mode autodiff tensor engine, training loop, metrics, synthetic
data, and ablation harness."""

from .data import Manifest, Sample, batch_iter, generate_phantoms, load_manifest
from .errors import (CheckpointError, ConfigError, DataError, GraphError,
                     NumericsError, ShapeError, TrainingError, TransclawError)
from .metrics import EvalReport, average_hausdorff, dice_per_class, evaluate, hd95
from .model import ModelConfig, TransClawUNet
from .tensor import (GradGraph, Tensor, backward, finite_diff_check, no_grad,
                     precision, set_default_dtype)
from .train import (SGD, TrainSettings, load_checkpoint, save_checkpoint,
                    train_loop)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "EvalReport", "GradGraph",
    "GraphError", "Manifest", "ModelConfig", "NumericsError", "SGD", "Sample",
    "ShapeError", "Tensor", "TrainSettings", "TrainingError", "TransClawUNet",
    "TransclawError", "average_hausdorff", "backward", "batch_iter",
    "dice_per_class", "evaluate", "finite_diff_check", "generate_phantoms",
    "hd95", "load_checkpoint", "load_manifest", "no_grad", "precision",
    "save_checkpoint", "set_default_dtype", "train_loop",
]
