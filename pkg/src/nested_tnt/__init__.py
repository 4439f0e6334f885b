"""ViT, TNT and Nested-TNT image classifiers on a small numpy autodiff engine."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, DatasetHandle, load_cifar, load_folder_dataset, synthetic_dataset
from .models import ConfigError, Model, ModelConfig, build_model, count_params, model_forward
from .tensor import GradientTape, Tensor, backward
from .train import TrainConfig, bench_throughput, evaluate_top1, train

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "DatasetHandle", "GradientTape", "Model",
    "ModelConfig", "Tensor", "TrainConfig", "backward", "bench_throughput", "build_model",
    "count_params", "evaluate_top1", "load_checkpoint", "load_cifar", "load_folder_dataset",
    "model_forward", "save_checkpoint", "synthetic_dataset", "train",
]
