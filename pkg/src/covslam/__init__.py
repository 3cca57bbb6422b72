"""RGBD SLAM with G-ICP tracking and Gaussian-splat mapping on a shared Gaussian map."""

from .cloud import Frame, Intrinsics, PointCloud
from .config import SlamConfig, load_config
from .errors import DegenerateFrameError, FormatError, TrackingLostError
from .evaluation import Trajectory, ate_rmse, psnr, read_trajectory, write_trajectory
from .gaussian_map import GaussianMap, GaussianSet, MapConfig
from .geometry import PoseSE3
from .gicp import GicpConfig, align
from .pipeline import SlamReport, run
from .render import render
from .ssim import ssim
from .synth import SceneSpec, synth_scene

__version__ = "0.1.0"

__all__ = [
    "Frame", "Intrinsics", "PointCloud", "SlamConfig", "load_config", "DegenerateFrameError",
    "FormatError", "TrackingLostError", "Trajectory", "ate_rmse", "psnr", "read_trajectory",
    "write_trajectory", "GaussianMap", "GaussianSet", "MapConfig", "PoseSE3", "GicpConfig",
    "align", "SlamReport", "run", "render", "ssim", "SceneSpec", "synth_scene",
]
