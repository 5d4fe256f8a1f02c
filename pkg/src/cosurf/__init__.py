"""Collaborative dense surfel mapping for multiple RGB-D cameras."""

from .collab import Session, StandalonePipeline, map_and_track
from .config import SessionConfig
from .geometry import Intrinsics, RigidTransform
from .loopclosure import MergeEvent
from .surfelmap import SurfelMap

__version__ = "0.1.0"

__all__ = ["Session", "StandalonePipeline", "map_and_track", "SessionConfig", "Intrinsics", "RigidTransform",
           "MergeEvent", "SurfelMap", "__version__"]
