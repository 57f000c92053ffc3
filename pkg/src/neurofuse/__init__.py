"""Volumetric neuroimaging preprocessing and 3D CNN classification toolkit."""

from .errors import NeurofuseError
from .volio import AffineTransform, Dof, GridSpec, Interp, Volume3D

__version__ = "0.1.0"

__all__ = [
    "NeurofuseError",
    "Volume3D",
    "AffineTransform",
    "GridSpec",
    "Dof",
    "Interp",
    "__version__",
]
