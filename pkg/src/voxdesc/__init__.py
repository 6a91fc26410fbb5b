"""Weakly supervised voxel-based 3D local descriptors and point cloud registration."""

__version__ = "0.1.0"

from .pointcloud import (
    AffineTransform,
    PointCloud,
    RigidTransform,
    build_spatial_index,
    farthest_point_sample,
    knn_query,
    radius_query,
)
from .lrf import AmbiguousFrameError, DegeneratePatchError, LrfFrame, estimate_lrf
from .voxelizer import VoxelGrid, VoxelGridSpec, voxelize, voxelize_backward
from .descriptor import (
    CheckpointError,
    NetworkParams,
    init_network,
    load_checkpoint,
    read_descriptors,
    save_checkpoint,
    write_descriptors,
)
from .matching import (
    CorrespondenceSet,
    match_descriptors,
    mutual_nearest,
    spectral_weights,
)
from .alignment import fit_affine_weighted, kabsch_rigid, registration_loss
from .registration import (
    RansacConfig,
    RegistrationFailedError,
    RegistrationResult,
    extract_descriptors,
    ransac_register,
    register_pair,
)
from .metrics import (
    feature_match_recall,
    inlier_ratio,
    pose_errors,
    registration_recall,
)
from .datagen import PairGenConfig, PairSample, load_point_cloud, make_pair, make_shape
from .trainer import TrainConfig, TrainingAborted, train, training_step

__all__ = [
    "__version__",
    "AffineTransform",
    "AmbiguousFrameError",
    "CheckpointError",
    "CorrespondenceSet",
    "DegeneratePatchError",
    "LrfFrame",
    "NetworkParams",
    "PairGenConfig",
    "PairSample",
    "PointCloud",
    "RansacConfig",
    "RegistrationFailedError",
    "RegistrationResult",
    "RigidTransform",
    "TrainConfig",
    "TrainingAborted",
    "VoxelGrid",
    "VoxelGridSpec",
    "build_spatial_index",
    "estimate_lrf",
    "extract_descriptors",
    "farthest_point_sample",
    "feature_match_recall",
    "fit_affine_weighted",
    "init_network",
    "inlier_ratio",
    "kabsch_rigid",
    "knn_query",
    "load_checkpoint",
    "load_point_cloud",
    "make_pair",
    "make_shape",
    "match_descriptors",
    "mutual_nearest",
    "pose_errors",
    "radius_query",
    "ransac_register",
    "read_descriptors",
    "register_pair",
    "registration_loss",
    "registration_recall",
    "save_checkpoint",
    "spectral_weights",
    "train",
    "training_step",
    "voxelize",
    "voxelize_backward",
    "write_descriptors",
]
