"""Point-based temporal grounding of text queries in clip-feature sequences."""

from .config import Config, DecodeConfig, ModelConfig, TrainConfig
from .model import GroundingModel

__all__ = ["Config", "DecodeConfig", "GroundingModel", "ModelConfig", "TrainConfig"]
__version__ = "0.1.0"
