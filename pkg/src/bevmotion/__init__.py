"""Self-supervised BEV motion fields from LiDAR-like sequences.

Pseudo motion labels come from entropic optimal-transport matching between
the occupied cells of consecutive bird's-eye-view occupancy maps; spatial
(cluster / KNN) and temporal (forward / backward) consistency losses
regularize per-scene motion-field optimization against those labels.
"""

from .core import (BACKWARD, FORWARD, Config, GridSpec, MotionStack,
                   PointFrame, SceneSequence, validate_config)
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKWARD",
    "FORWARD",
    "Config",
    "GridSpec",
    "KERNEL_BACKEND",
    "MotionStack",
    "PointFrame",
    "SceneSequence",
    "validate_config",
    "__version__",
]
