"""Gaussian splatting for cross-view depth supervision and voxel occupancy, with a ray-marching baseline."""

from .errors import (ConfigurationError, ContractError, DegenerateInputError, FormatError,
                     PreconditionError, SplatOccError, UnsupportedVersionError)
from .gaussians import Gaussian3D, GaussianSet, load_gaussians, save_gaussians
from .geometry import Camera, CameraRig, DepthMap, Intrinsics, Pose, surround_rig
from .losses import (DepthMetrics, LossBreakdown, depth_metrics, miou, photometric_loss, semantic_loss, ssim,
                     temporal_loss, tv_loss)
from .masks import compute_overlap_mask, erode, maskout_for_gsp
from .optim import AdamState, adam_step
from .splat import RenderOutput, depth_map_to_gaussians, splat_backward, splat_forward, voxel_to_gaussians
from .volume import RaySamplingConfig, volume_backward, volume_forward
from .voxel_scene import SceneSpec, VoxelGrid, generate_scene, load_grid, raycast_gt, save_grid, voxelize

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Camera", "CameraRig", "ConfigurationError", "ContractError", "DegenerateInputError",
    "DepthMap", "DepthMetrics", "FormatError", "Gaussian3D", "GaussianSet", "Intrinsics", "LossBreakdown", "Pose",
    "PreconditionError", "RaySamplingConfig", "RenderOutput", "SceneSpec", "SplatOccError",
    "UnsupportedVersionError", "VoxelGrid", "adam_step", "compute_overlap_mask", "depth_map_to_gaussians",
    "depth_metrics", "erode", "generate_scene", "load_gaussians", "load_grid", "maskout_for_gsp", "miou",
    "photometric_loss", "raycast_gt", "save_gaussians", "save_grid", "semantic_loss", "splat_backward",
    "splat_forward", "ssim", "surround_rig", "temporal_loss", "tv_loss", "volume_backward", "volume_forward",
    "voxel_to_gaussians", "voxelize",
]
