"""Similarity machinery for coarse matching.

Cosine similarity between descriptor sets, bidirectional (forward /
backward) max-normalization that encodes mutual-best consistency, and an
attention-based neighbor encoding that folds neighborhood agreement into
the similarity signal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, concat, softmax
from .nn import SharedMlp, init_shared_mlp
from .spatial import build_index, knn_spatial_batch

__all__ = [
    "SimilarityMatrices", "NeighborEncoder", "init_neighbor_encoder",
    "cosine_similarity_matrix", "normalize_bidirectional",
    "neighbor_encode", "assemble_similarity_features", "compute_similarity",
]

_NORM_FLOOR = 1e-12
_DENOM_FLOOR = 1e-6


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class SimilarityMatrices:
    """Raw and normalized similarity, for plain and neighbor-aware descriptors."""

    raw: Tensor
    forward: Tensor
    backward: Tensor
    raw_neighbor: Tensor = None
    forward_neighbor: Tensor = None
    backward_neighbor: Tensor = None


def cosine_similarity_matrix(d_src, d_tgt) -> Tensor:
    """Pairwise cosine similarity; zero-norm rows are floored and flagged."""
    a, b = _as_tensor(d_src), _as_tensor(d_tgt)
    if a.shape[1] != b.shape[1]:
        raise ValueError("descriptor widths differ")
    na = a.norm(axis=1, keepdims=True, eps=0.0)
    nb = b.norm(axis=1, keepdims=True, eps=0.0)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        warnings.warn("zero-norm descriptor row in cosine similarity",
                      RuntimeWarning, stacklevel=2)
    return (a / na.clip_min(_NORM_FLOOR)) @ (b / nb.clip_min(_NORM_FLOOR)).T


def normalize_bidirectional(s) -> tuple:
    """Row-max and column-max normalized similarity matrices.

    Cosine values may be negative, which makes direct max-division
    sign-flipping; similarities are affinely shifted to [0, 1] first,
    which preserves the argmax structure the consensus features encode.
    """
    st = _as_tensor(s)
    shifted = (st + 1.0) * 0.5
    row_max = shifted.max(axis=1, keepdims=True).clip_min(_DENOM_FLOOR)
    col_max = shifted.max(axis=0, keepdims=True).clip_min(_DENOM_FLOOR)
    return shifted / row_max, shifted / col_max


def assemble_similarity_features(pairs, matrices: SimilarityMatrices) -> Tensor:
    """Per candidate pair (i, j), the 4-vector of forward/backward scores."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    m = matrices.forward.shape[0]
    if np.any(pairs < 0) or np.any(pairs >= m):
        raise ValueError("pair index out of range")
    rows, cols = pairs[:, 0], pairs[:, 1]
    return concat([
        matrices.forward[rows, cols].reshape(-1, 1),
        matrices.backward[rows, cols].reshape(-1, 1),
        matrices.forward_neighbor[rows, cols].reshape(-1, 1),
        matrices.backward_neighbor[rows, cols].reshape(-1, 1),
    ], axis=1)


# -- neighbor encoding -----------------------------------------------------


@dataclass
class NeighborEncoder:
    """Attention net aggregating each keypoint's spatial neighborhood."""

    trunk: SharedMlp
    scorer: SharedMlp
    neighbor_count: int = 8

    @property
    def parameters(self):
        return self.trunk.parameters + self.scorer.parameters

    def named_parameters(self, prefix):
        out = {}
        for part, mlp in (("trunk", self.trunk), ("score", self.scorer)):
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{prefix}.{part}.w{i}"] = w
                out[f"{prefix}.{part}.b{i}"] = b
        return out


def init_neighbor_encoder(descriptor_channels, rng, neighbor_count=8,
                          hidden=64) -> NeighborEncoder:
    width = descriptor_channels + 4  # descriptor + canonical offset + distance
    trunk = init_shared_mlp((width, hidden, hidden), rng, final_activation="relu")
    scorer = init_shared_mlp((2 * hidden, hidden, 1), rng)
    return NeighborEncoder(trunk, scorer, neighbor_count)


def neighbor_encode(keypoints, descriptors, encoder: NeighborEncoder,
                    k: int = None):
    """Attentively aggregate each keypoint's k spatial neighbors.

    Returns (neighbor_aware_descriptors (M, C), attention (M, k)); each
    output row is a convex combination of neighbor descriptor rows.
    """
    from .features import canonical_relative_coords

    kp = _as_tensor(keypoints)
    d = _as_tensor(descriptors)
    m = kp.shape[0]
    k = encoder.neighbor_count if k is None else k
    if k > m:
        raise ValueError("neighborhood size exceeds keypoint count")
    index = build_index(kp.data)
    nbr_idx, _ = knn_spatial_batch(index, kp.data, k)

    neighbors = kp[nbr_idx]                       # (M, k, 3)
    rel, dist = canonical_relative_coords(kp, neighbors)
    feats = concat([d[nbr_idx], rel, dist], axis=2)
    f = encoder.trunk(feats)
    pooled = f.max(axis=1, keepdims=True) + Tensor(np.zeros((m, k, 1)))
    logits = encoder.scorer(concat([f, pooled], axis=2)).reshape(m, k)
    attn = softmax(logits, axis=1)
    aggregated = (attn.reshape(m, k, 1) * d[nbr_idx]).sum(axis=1)
    return aggregated, attn


def compute_similarity(src_keypoints, src_descriptors, tgt_keypoints,
                       tgt_descriptors, encoder: NeighborEncoder) -> SimilarityMatrices:
    """Build all similarity matrices for a coarse layer pair."""
    s = cosine_similarity_matrix(src_descriptors, tgt_descriptors)
    fwd, bwd = normalize_bidirectional(s)
    dn_src, _ = neighbor_encode(src_keypoints, src_descriptors, encoder)
    dn_tgt, _ = neighbor_encode(tgt_keypoints, tgt_descriptors, encoder)
    sn = cosine_similarity_matrix(dn_src, dn_tgt)
    fwd_n, bwd_n = normalize_bidirectional(sn)
    return SimilarityMatrices(s, fwd, bwd, sn, fwd_n, bwd_n)
