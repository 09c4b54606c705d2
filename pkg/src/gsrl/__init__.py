"""Differentiable Gaussian splatting and a feed-forward image-to-Gaussians pipeline."""
from .camera import Camera
from .errors import (
    ConfigError,
    ContractViolation,
    DatasetError,
    GenerationError,
    GSRLError,
    ShapeError,
    TrainingAborted,
)
from .gaussians import GaussianCloud
from .rasterizer import RasterSettings, rasterize

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ConfigError",
    "ContractViolation",
    "DatasetError",
    "GaussianCloud",
    "GenerationError",
    "GSRLError",
    "RasterSettings",
    "ShapeError",
    "TrainingAborted",
    "rasterize",
]
