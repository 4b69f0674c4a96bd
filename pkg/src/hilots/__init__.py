"""Temporal semi-supervised LiDAR segmentation on a cylindrical voxel grid.

The pipeline voxelizes a short window of frames, embeds far and near
super-voxels with two attention flows, fuses the result into a compact
sparse encoder-decoder, and trains with a mean teacher.  Everything runs
on numpy with a small tape-based autodiff.
"""
from .data import SequenceDataset, SplitSpec, SyntheticSceneSpec, generate_synthetic_dataset, make_split
from .evaluate import ConfusionMatrix, evaluate, miou
from .geom import CylGridConfig, PointCloudFrame, voxelize_frame
from .heu import HeuConfig
from .model import ModelConfig, forward, init_params, predict, prepare_window
from .trainer import LossWeights, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "SequenceDataset", "SplitSpec", "SyntheticSceneSpec", "generate_synthetic_dataset", "make_split",
    "ConfusionMatrix", "evaluate", "miou", "CylGridConfig", "PointCloudFrame", "voxelize_frame",
    "HeuConfig", "ModelConfig", "forward", "init_params", "predict", "prepare_window",
    "LossWeights", "TrainConfig", "train",
]
