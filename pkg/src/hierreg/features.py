"""Hierarchical keypoint, descriptor and saliency-uncertainty extraction.

Each layer selects keypoints by weighted farthest point sampling, builds
spatial clusters, refines keypoint locations with attention, and pools a
descriptor per cluster. Cluster coordinates are expressed in a local
yaw-canonical frame so descriptors match across yaw-rotated views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, concat, softmax
from .geometry import PointCloud
from .nn import SharedMlp, init_shared_mlp
from .spatial import build_index, knn_spatial_batch, wfps

__all__ = [
    "LayerConfig", "KeypointSet", "FeaturePyramid", "FeatureLayer",
    "default_layer_configs", "init_feature_layer",
    "canonical_relative_coords", "extract_layer", "extract_pyramid",
]

_SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class LayerConfig:
    """Shape configuration of one extraction layer."""

    keypoint_count: int
    descriptor_channels: int
    cluster_size: int = 16
    refine_hidden: int = 64
    saliency_hidden: int = 32
    descriptor_hidden: tuple = (64, 64)

    def __post_init__(self):
        if self.keypoint_count < 1 or self.descriptor_channels < 1 \
                or self.cluster_size < 1:
            raise ValueError("layer sizes must be positive")


def default_layer_configs(input_points: int = 1024):
    """Keypoint pyramid 256/128/64 for 1024-point clouds, scaled with input."""
    scale = max(1, input_points // 1024)
    return (
        LayerConfig(256 * scale, 64),
        LayerConfig(128 * scale, 128),
        LayerConfig(64 * scale, 256),
    )


@dataclass
class KeypointSet:
    """Keypoints with descriptors, saliency uncertainties and carried features."""

    keypoints: Tensor          # (M, 3)
    descriptors: Tensor        # (M, C)
    uncertainties: Tensor      # (M,), strictly positive
    features: Tensor = None    # (M, C) attentively pooled pointwise features

    def __post_init__(self):
        m = self.keypoints.shape[0]
        if self.descriptors.shape[0] != m or self.uncertainties.shape[0] != m:
            raise ValueError("keypoint set row counts disagree")
        if np.any(self.uncertainties.data <= 0):
            raise ValueError("saliency uncertainties must be positive")


@dataclass
class FeaturePyramid:
    """Cascaded keypoint sets, shallowest first."""

    layers: list

    def __getitem__(self, i):
        return self.layers[i]


@dataclass
class FeatureLayer:
    """Learned heads of one extraction layer."""

    config: LayerConfig
    refine: SharedMlp
    saliency: SharedMlp
    descriptor: SharedMlp

    @property
    def parameters(self):
        return (self.refine.parameters + self.saliency.parameters
                + self.descriptor.parameters)

    def named_parameters(self, prefix):
        out = {}
        for part, mlp in (("refine", self.refine), ("sal", self.saliency),
                          ("desc", self.descriptor)):
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{prefix}.{part}.w{i}"] = w
                out[f"{prefix}.{part}.b{i}"] = b
        return out


def init_feature_layer(config: LayerConfig, rng, in_descriptor_channels=0,
                       carries_input_state=False) -> FeatureLayer:
    """Initialize the heads for a layer; layer 1 has no inherited inputs."""
    width = 4 + in_descriptor_channels  # canonical offset + distance
    if carries_input_state:
        width += in_descriptor_channels + 1  # carried features + uncertainty
    refine = init_shared_mlp((width, config.refine_hidden, 1), rng)
    saliency = init_shared_mlp((width, config.saliency_hidden, 1), rng)
    descriptor = init_shared_mlp(
        (width,) + tuple(config.descriptor_hidden) + (config.descriptor_channels,),
        rng, final_activation="none")
    return FeatureLayer(config, refine, saliency, descriptor)


def canonical_relative_coords(centers: Tensor, neighbors: Tensor,
                              eps: float = 1e-9):
    """Cluster offsets in a yaw-canonical frame, plus distances.

    The frame rotates about z so the cluster centroid offset lies in the
    xz-plane; under a yaw rotation of the whole cloud the features are
    unchanged. Returns (coords (M, k, 3), distances (M, k, 1)).
    """
    m, k = neighbors.shape[0], neighbors.shape[1]
    rel = neighbors - centers.reshape(m, 1, 3)
    dist = rel.norm(axis=2, keepdims=True)
    centroid = rel.mean(axis=1)                      # (M, 3)
    hx = centroid[:, 0].reshape(m, 1)
    hy = centroid[:, 1].reshape(m, 1)
    r = ((hx * hx) + (hy * hy) + eps * eps).sqrt()
    c, s = hx / r, hy / r
    x, y = rel[:, :, 0], rel[:, :, 1]
    xr = x * c + y * s
    yr = y * c - x * s
    coords = concat([xr.reshape(m, k, 1), yr.reshape(m, k, 1),
                     rel[:, :, 2].reshape(m, k, 1)], axis=2)
    return coords, dist


def _as_input(source):
    """Normalize the layer input to (points, descriptors, features, unc)."""
    if isinstance(source, KeypointSet):
        return source.keypoints, source.descriptors, source.features, \
            source.uncertainties
    if isinstance(source, PointCloud):
        return Tensor(source.points), None, None, None
    if isinstance(source, Tensor):
        return source, None, None, None
    return Tensor(np.asarray(source, dtype=np.float64).reshape(-1, 3)), \
        None, None, None


def extract_layer(source, layer: FeatureLayer, seed: int = 0) -> KeypointSet:
    """Run one extraction layer over a cloud or the previous keypoint set."""
    pts, in_desc, in_feat, in_unc = _as_input(source)
    cfg = layer.config
    n = pts.shape[0]
    if n < cfg.keypoint_count:
        raise ValueError("input smaller than the requested keypoint count")
    k = min(cfg.cluster_size, n)

    if in_unc is None:
        sample_weights = np.ones(n)
    else:
        sample_weights = 1.0 / np.maximum(in_unc.data, _SIGMA_FLOOR)
    sel = wfps(pts.data, sample_weights, cfg.keypoint_count, seed)

    index = build_index(pts.data)
    nbr_idx, _ = knn_spatial_batch(index, pts.data[sel], k)
    centers = pts[sel]
    neighbors = pts[nbr_idx]
    coords, dist = canonical_relative_coords(centers, neighbors)
    parts = [coords, dist]
    if in_desc is not None:
        parts.append(in_desc[nbr_idx])
    if in_feat is not None:
        parts.append(in_feat[nbr_idx])
    if in_unc is not None:
        parts.append(in_unc[nbr_idx].reshape(-1, k, 1))
    feats = concat(parts, axis=2)

    attn = softmax(layer.refine(feats).reshape(-1, k), axis=1)
    refined = (attn.reshape(-1, k, 1) * neighbors).sum(axis=1)

    sigma = layer.saliency(feats).reshape(-1, k).max(axis=1).softplus() \
        + _SIGMA_FLOOR

    pointwise = layer.descriptor(feats)              # (M, k, C)
    pooled = pointwise.max(axis=1)
    # unit-norm rows keep euclidean kNN and cosine similarity consistent
    descriptors = pooled / pooled.norm(axis=1, keepdims=True, eps=1e-12)
    carried = (attn.reshape(-1, k, 1) * pointwise).sum(axis=1)
    return KeypointSet(refined, descriptors, sigma, carried)


def extract_pyramid(cloud, layers, seed: int = 0) -> FeaturePyramid:
    """Run the cascaded layers; layer l consumes the output of layer l-1."""
    out, current = [], cloud
    for li, layer in enumerate(layers):
        current = extract_layer(current, layer, seed=seed + li)
        out.append(current)
    return FeaturePyramid(out)
