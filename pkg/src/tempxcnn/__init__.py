"""Spatio-temporal CNN / X-CNN classifiers for longitudinal slice series,
built on a small numpy network library."""

from .models import KINDS, Model, ModelSpec, build_model, count_params, load_checkpoint, save_checkpoint
from .phantom import PhantomConfig, generate_dataset, load_dataset
from .prep import DatasetSplit, ImageSlice, Sample, build_samples, partition, register_translation
from .tensor import SeededRng, Tensor
from .training import ExperimentConfig, MetricsRecord, compare_models, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "KINDS", "Model", "ModelSpec", "build_model", "count_params", "load_checkpoint", "save_checkpoint",
    "PhantomConfig", "generate_dataset", "load_dataset",
    "DatasetSplit", "ImageSlice", "Sample", "build_samples", "partition", "register_translation",
    "SeededRng", "Tensor", "ExperimentConfig", "MetricsRecord", "compare_models", "evaluate", "train",
]
