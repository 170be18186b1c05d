"""Fast continuous convolutional Taylor transform and differentiable layers."""

from .expansion import Accessor, Engine, SourceSet, axis_points
from .kernel import DEFAULT_ALPHA, KernelModel
from .multiindex import build_table, index_count

__all__ = [
    "Accessor",
    "Engine",
    "SourceSet",
    "axis_points",
    "KernelModel",
    "DEFAULT_ALPHA",
    "build_table",
    "index_count",
]

__version__ = "0.1.0"
