"""Toy-scale multi-granularity referring expression segmentation."""
from .geometry import BoundingBox, CoordSpace, FeatureMap, Level
from .model import ModelConfig, UniRES
from .train import TrainConfig, evaluate, train

__all__ = ["BoundingBox", "CoordSpace", "FeatureMap", "Level", "ModelConfig", "UniRES", "TrainConfig",
           "evaluate", "train"]
__version__ = "0.1.0"
