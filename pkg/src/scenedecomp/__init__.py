"""Textual scene decomposition on a miniature pixel-space diffusion model."""

from .concepts import Scene
from .model import Model
from .trainer import TrainConfig, train

__all__ = ["Model", "Scene", "TrainConfig", "train"]
__version__ = "0.1.0"
