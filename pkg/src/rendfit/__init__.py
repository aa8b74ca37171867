"""Fit 3D shape, texture and pose of objects to monocular evidence by
differentiable rendering."""
from .errors import RendfitError
from .geometry import Box2D, CameraIntrinsics, Cuboid3D, DatasetStats

__version__ = "0.1.0"

__all__ = ["Box2D", "CameraIntrinsics", "Cuboid3D", "DatasetStats", "RendfitError", "__version__"]
