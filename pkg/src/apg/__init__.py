"""Adaptive parameter generation layers for CTR models."""

__version__ = "0.1.0"

from .conditioning import ConditionStrategy
from .layers import ApgLayer, GeneratorNet, Version, collapse_overparam, make_layer
from .model import CtrModel, ModelConfig, build_model, predict, train

__all__ = [
    "ApgLayer",
    "ConditionStrategy",
    "CtrModel",
    "GeneratorNet",
    "ModelConfig",
    "Version",
    "build_model",
    "collapse_overparam",
    "make_layer",
    "predict",
    "train",
]
