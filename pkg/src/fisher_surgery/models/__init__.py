from .base import LayeredClassifier, grad_log_prob, log_prob, predict
from .config import ModelConfig, ModelKind
from .data_classes import DataSplits, Example, LayerGroup, LayerPartition, TaskKind
from .reference import build_from_config, build_reference_model

__all__ = [
    "DataSplits",
    "Example",
    "LayerGroup",
    "LayerPartition",
    "LayeredClassifier",
    "ModelConfig",
    "ModelKind",
    "TaskKind",
    "build_from_config",
    "build_reference_model",
    "grad_log_prob",
    "log_prob",
    "predict",
]
