"""Watermarking for 3D Gaussian splat models: embedding, extraction and robustness tests."""

__version__ = "0.1.0"

from .errors import NumericError, ValidationError  # noqa: E402
from .scene import CameraView, GaussianCloud, TrainingSet, load_scene, save_scene, synthesize_toy_scene  # noqa: E402

__all__ = [
    "CameraView",
    "GaussianCloud",
    "NumericError",
    "TrainingSet",
    "ValidationError",
    "load_scene",
    "save_scene",
    "synthesize_toy_scene",
]
