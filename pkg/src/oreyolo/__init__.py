"""OreYOLO: a lightweight single-stage ore detector.

CSP backbone with multi-scale attention, an asymptotic feature pyramid neck,
SPPFCSPC horizontal fusion and an MPDIoU-based detection loss.
"""

from oreyolo.config import ModelConfig, TrainConfig
from oreyolo.errors import DataError, InvalidConfigError, ShapeError
from oreyolo.model import OreYOLO, build_model

__all__ = [
    "DataError",
    "InvalidConfigError",
    "ModelConfig",
    "OreYOLO",
    "ShapeError",
    "TrainConfig",
    "build_model",
]

__version__ = "0.1.0"
