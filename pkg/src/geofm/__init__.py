"""Unified multi-modal (HR optical / multispectral / SAR) backbone with
self-supervised pre-training at desk scale."""

from .config import BackboneConfig, FusionConfig, ModelConfig, ObjectiveConfig, PretrainConfig, TrainConfig
from .model import PretrainModel

__all__ = ["BackboneConfig", "FusionConfig", "ModelConfig", "ObjectiveConfig", "PretrainConfig",
           "PretrainModel", "TrainConfig"]
__version__ = "0.1.0"
