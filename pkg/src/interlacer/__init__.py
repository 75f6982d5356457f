"""Particle-based world model with linear-time point-cloud dynamics."""

from .errors import ConfigError, ContractError, DimensionError, ValidationError
from .interlacer import Interlacer, InterlacerConfig, NeighborAttender, interlacer_forward, neighbor_attender
from .model import WorldModel, load_model, save_model
from .spatial import PointIndex, knn
from .state import DynamicsDelta, KinematicSkeleton, ParticleState
from .tensor import Tensor, backward, track_memory

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "ValidationError",
    "Interlacer", "InterlacerConfig", "NeighborAttender", "interlacer_forward", "neighbor_attender",
    "WorldModel", "load_model", "save_model",
    "PointIndex", "knn",
    "DynamicsDelta", "KinematicSkeleton", "ParticleState",
    "Tensor", "backward", "track_memory",
]
