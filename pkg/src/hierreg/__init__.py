"""Hierarchical coarse-to-fine rigid point cloud registration."""

from .geometry import (PointCloud, RigidTransform, RegistrationMetrics,
                       apply_transform, compose, invert, voxel_downsample,
                       random_subsample, rte, rre, recall, evaluate,
                       load_cloud, save_cloud_text, save_cloud_binary)
from .pipeline import (ModelConfig, TrainConfig, SyntheticSceneConfig,
                       RegistrationModel, RegistrationResult, init_model,
                       save_model, load_model, register, train, loss,
                       generate_synthetic_pair, make_pairs,
                       nn_baseline_register)
from .estimator import PointCloudRegistrar

__version__ = "0.1.0"

__all__ = [
    "PointCloud", "RigidTransform", "RegistrationMetrics",
    "apply_transform", "compose", "invert", "voxel_downsample",
    "random_subsample", "rte", "rre", "recall", "evaluate",
    "load_cloud", "save_cloud_text", "save_cloud_binary",
    "ModelConfig", "TrainConfig", "SyntheticSceneConfig",
    "RegistrationModel", "RegistrationResult", "init_model",
    "save_model", "load_model", "register", "train", "loss",
    "generate_synthetic_pair", "make_pairs", "nn_baseline_register",
    "PointCloudRegistrar",
    "__version__",
]
