"""Geometric conditioning for unified asset insertion and novel view synthesis.

Depth unprojection, joint point/gaussian-splat rendering, conditioning tensors,
training-pair construction and a small numpy diffusion harness.
"""
from .conditioning import ConditioningBundle, Trajectory, render_joint
from .dataset import Scene, TrainingPair, build_insertion_pair, build_nvs_pair
from .geometry import CameraIntrinsics, ColorPointCloud, Frame, OrientedBox3D, RigidPose, project_points, unproject
from .splat import Gaussian3D, GaussianAsset, align_asset, rasterize

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "ColorPointCloud", "ConditioningBundle", "Frame", "Gaussian3D", "GaussianAsset",
    "OrientedBox3D", "RigidPose", "Scene", "Trajectory", "TrainingPair", "align_asset", "build_insertion_pair",
    "build_nvs_pair", "project_points", "rasterize", "render_joint", "unproject",
]
