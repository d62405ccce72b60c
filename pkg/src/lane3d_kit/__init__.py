"""lane3d-kit: deterministic numerics for 3D lane detection heads.

Anchor generation from learned prototypes, camera/LiDAR projection and
feature sampling, matching and losses with analytic gradients, iterative
refinement, and the standard 3D-lane evaluation protocols, all runnable at
desk scale on synthetic scenes.
"""

from . import (
    anchors,
    config,
    errors,
    evaluation,
    geometry,
    gradcheck,
    head,
    lanes,
    laneio,
    losses,
    sampling,
    synth,
    tensorio,
)
from .config import DatasetProfile, RunConfig, make_profile
from .geometry import CameraRig, FeaturePoint, GroundPoint
from .lanes import Lane3D

__version__ = "0.1.0"

__all__ = [
    "CameraRig",
    "DatasetProfile",
    "FeaturePoint",
    "GroundPoint",
    "Lane3D",
    "RunConfig",
    "__version__",
    "anchors",
    "config",
    "errors",
    "evaluation",
    "geometry",
    "gradcheck",
    "head",
    "laneio",
    "lanes",
    "losses",
    "make_profile",
    "sampling",
    "synth",
    "tensorio",
]
