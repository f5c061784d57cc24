"""Test-time semantic occupancy from lifted, moved and voxelized 3D Gaussians."""

from .core import (
    SENTINEL,
    CameraView,
    FrameBundle,
    Gaussian,
    GaussianSet,
    GridSpec,
    PipelineConfig,
    VoxelGrid,
    world_to_grid,
)

__version__ = "0.1.0"

__all__ = [
    "SENTINEL",
    "CameraView",
    "FrameBundle",
    "Gaussian",
    "GaussianSet",
    "GridSpec",
    "PipelineConfig",
    "VoxelGrid",
    "world_to_grid",
]
