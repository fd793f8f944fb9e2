"""Image-based virtual try-on with synchronized random-resized-crop augmentation.

Modules:

- ``data_io``: dataset layout, record loading, pose heatmaps
- ``agnostic``: garment-free person representation
- ``crop``: crop window sampling, lockstep cropping, dataset pre-cropping
- ``tps``: thin-plate-spline solve, sampling grids, differentiable warping
- ``networks``: segmentation / deformation / synthesis generators, discriminator
- ``training``: stage-wise training loops and losses
- ``evaluation``: unpaired inference, FID statistics and reports
- ``config`` / ``cli``: layered configuration and the command line
"""

from .agnostic import AgnosticConfig, build_agnostic
from .crop import CropConfig, CropWindow, crop_sample, precrop_dataset, sample_crop_window, transform_keypoints
from .data_io import PairList, PoseKeypoints, Sample, SegmentationMap, load_dataset_index, load_sample, render_pose_map
from .evaluation import FIDStats, HandcraftedExtractor, accumulate_fid_stats, build_fid_report, frechet_distance
from .tps import TPSParams, bending_energy, make_sampling_grid, solve_tps, warp_image

__version__ = "0.1.0"

__all__ = [
    "AgnosticConfig", "build_agnostic",
    "CropConfig", "CropWindow", "crop_sample", "precrop_dataset", "sample_crop_window", "transform_keypoints",
    "PairList", "PoseKeypoints", "Sample", "SegmentationMap", "load_dataset_index", "load_sample",
    "render_pose_map",
    "FIDStats", "HandcraftedExtractor", "accumulate_fid_stats", "build_fid_report", "frechet_distance",
    "TPSParams", "bending_energy", "make_sampling_grid", "solve_tps", "warp_image",
]
