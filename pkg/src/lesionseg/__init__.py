"""Polyp segmentation with an input-conditioned dynamic segmentation head."""

from .config import ConfigError, ModelConfig, RunConfig, TrainConfig
from .seg_core import ForwardTrace, LesionSegNet, build_model, count_parameters

__version__ = "0.1.0"

__all__ = ["ConfigError", "ModelConfig", "RunConfig", "TrainConfig", "ForwardTrace", "LesionSegNet",
           "build_model", "count_parameters"]
