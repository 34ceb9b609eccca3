"""Soft correspondence prediction and the differentiable weighted Kabsch solve."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, concat, softmax
from .geometry import RigidTransform
from .nn import SharedMlp, init_shared_mlp
from .spatial import build_index, knn_descriptor_batch, knn_spatial_batch

__all__ = [
    "CorrespondenceClusters", "CorrespondenceSet", "CorrespondenceNet",
    "init_correspondence_net",
    "build_coarse_clusters", "build_fine_clusters", "correspondence_forward",
    "normalize_confidence", "solve_weighted_kabsch", "kabsch_backward",
    "rotation_from_covariance", "transform_points",
]

_SV_SEPARATION = 1e-6
_F_CLAMP = 1e6


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def transform_points(points: Tensor, rotation, translation) -> Tensor:
    """Apply R p + t rowwise, staying inside the autodiff graph."""
    r = _as_tensor(rotation)
    t = _as_tensor(translation)
    return _as_tensor(points) @ r.T + t


# -- weighted Kabsch -------------------------------------------------------


def rotation_from_covariance(h: Tensor) -> Tensor:
    """Closest proper rotation maximizing tr(R H^T) for cross-covariance H.

    Forward: H = U S V^T, R = V diag(1, 1, det(V U^T)) U^T. Backward uses
    the standard SVD adjoint with the 1/(s_i^2 - s_j^2) factors clamped so
    near-degenerate spectra stay finite.
    """
    h = _as_tensor(h)
    u, s, vt = np.linalg.svd(h.data)
    v = vt.T
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0.0:
        d = 1.0
    dvec = np.array([1.0, 1.0, d])
    r_data = (v * dvec) @ u.T

    if s[0] > 0 and s[2] / s[0] < 1e-9:
        warnings.warn("rank-deficient cross-covariance in Kabsch solve",
                      RuntimeWarning, stacklevel=2)
    s2 = s ** 2
    gaps = np.abs(s2[None, :] - s2[:, None])[~np.eye(3, dtype=bool)]
    if gaps.min() < 1.0 / _F_CLAMP:
        warnings.warn("near-equal singular values in Kabsch solve; backward "
                      "factors are clamped", RuntimeWarning, stacklevel=2)

    def vjp(g):
        # g = dL/dR with R = V D U^T (D treated as piecewise constant).
        gv = g @ u * dvec          # dL/dV
        gu = g.T @ v * dvec        # dL/dU
        s2 = s ** 2
        diff = s2[None, :] - s2[:, None]
        with np.errstate(divide="ignore"):
            f = np.where(np.eye(3, dtype=bool), 0.0, 1.0 / diff)
        f = np.clip(f, -_F_CLAMP, _F_CLAMP)
        ju = f * (u.T @ gu - gu.T @ u)
        jv = f * (v.T @ gv - gv.T @ v)
        dh = u @ (ju * s[None, :] + s[:, None] * jv) @ vt
        return (dh,)

    return Tensor._make(r_data, (h,), vjp)


def solve_weighted_kabsch(src, tgt, weights):
    """Closed-form weighted rigid alignment of paired points.

    Minimizes sum_i w_i ||R x_i + t - y_i||^2 over rotations; returns
    (R, t) as tensors so gradients flow to the inputs.
    """
    x, y, w = _as_tensor(src), _as_tensor(tgt), _as_tensor(weights)
    m = x.shape[0]
    if m < 3 or y.shape[0] != m:
        raise ValueError("need at least 3 paired points")
    if np.any(w.data < 0) or not np.any(w.data > 0):
        raise ValueError("weights must be nonnegative and not all zero")

    wn = w / w.sum()
    wc = wn.reshape(m, 1)
    mu_x = (wc * x).sum(axis=0)
    mu_y = (wc * y).sum(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    h = (xc * wc).T @ yc
    r = rotation_from_covariance(h)
    t = mu_y - r @ mu_x
    return r, t


def kabsch_backward(src, tgt, weights, grad_rotation, grad_translation):
    """Gradients of the weighted Kabsch solve given upstream (dR, dt).

    Returns (d_src, d_tgt, d_weights).
    """
    x = Tensor(np.asarray(src, dtype=np.float64), requires_grad=True)
    y = Tensor(np.asarray(tgt, dtype=np.float64), requires_grad=True)
    w = Tensor(np.asarray(weights, dtype=np.float64), requires_grad=True)
    r, t = solve_weighted_kabsch(x, y, w)
    loss = (r * Tensor(grad_rotation)).sum() + (t * Tensor(grad_translation)).sum()
    loss.backward()
    return x.grad, y.grad, w.grad


def kabsch_transform(src, tgt, weights) -> RigidTransform:
    """Convenience wrapper returning a validated RigidTransform."""
    r, t = solve_weighted_kabsch(src, tgt, weights)
    return RigidTransform(r.data, t.data)


# -- correspondence network ------------------------------------------------


@dataclass
class CorrespondenceClusters:
    """Batched candidate clusters for one layer of registration.

    One cluster per source keypoint: the (possibly pre-transformed)
    center, its K candidate target keypoints, and the per-candidate
    feature rows fed to the correspondence network.
    """

    centers: Tensor                # (M, 3)
    candidate_indices: np.ndarray  # (M, K)
    candidates: Tensor             # (M, K, 3)
    features: Tensor               # (M, K, F)

    def __len__(self):
        return self.centers.shape[0]


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matched source keypoints, soft targets and normalized confidences."""

    source: np.ndarray
    soft_targets: np.ndarray
    confidences: np.ndarray


@dataclass
class CorrespondenceNet:
    """Shared-MLP trunk + attention scorer + confidence head for one layer."""

    trunk: SharedMlp
    scorer: SharedMlp
    confidence: SharedMlp

    @property
    def parameters(self):
        return (self.trunk.parameters + self.scorer.parameters
                + self.confidence.parameters)

    def named_parameters(self, prefix):
        out = {}
        for part, mlp in (("trunk", self.trunk), ("score", self.scorer),
                          ("conf", self.confidence)):
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{prefix}.{part}.w{i}"] = w
                out[f"{prefix}.{part}.b{i}"] = b
        return out


def init_correspondence_net(feature_width, rng, hidden=64) -> CorrespondenceNet:
    trunk = init_shared_mlp((feature_width, hidden, hidden, hidden), rng,
                            final_activation="relu")
    scorer = init_shared_mlp((2 * hidden, hidden, 1), rng)
    confidence = init_shared_mlp((hidden, hidden, 1), rng)
    return CorrespondenceNet(trunk, scorer, confidence)


def _geometric_features(centers: Tensor, candidates: Tensor):
    m, k = candidates.shape[0], candidates.shape[1]
    ctr = centers.reshape(m, 1, 3) + Tensor(np.zeros((m, k, 3)))
    rel = candidates - ctr
    dist = rel.norm(axis=2, keepdims=True)
    return concat([ctr, candidates, rel, dist], axis=2)


def _descriptor_features(src_desc, src_unc, tgt_desc, tgt_unc, cand_idx):
    m, k = cand_idx.shape
    ds = _as_tensor(src_desc)
    c = ds.shape[1]
    center_d = ds.reshape(m, 1, c) + Tensor(np.zeros((m, k, c)))
    cand_d = _as_tensor(tgt_desc)[cand_idx]
    center_u = _as_tensor(src_unc).reshape(m, 1, 1) + Tensor(np.zeros((m, k, 1)))
    cand_u = _as_tensor(tgt_unc)[cand_idx].reshape(m, k, 1)
    return concat([center_d, cand_d, center_u, cand_u], axis=2)


def build_coarse_clusters(src, tgt, k_candidates: int, matrices=None) -> CorrespondenceClusters:
    """Clusters from descriptor-space kNN, optionally with similarity features."""
    from .matching import assemble_similarity_features

    m = src.keypoints.shape[0]
    if k_candidates > tgt.keypoints.shape[0]:
        raise ValueError("more candidates requested than target keypoints")
    cand_idx, _ = knn_descriptor_batch(tgt.descriptors.data, src.descriptors.data,
                                       k_candidates)
    centers = _as_tensor(src.keypoints)
    candidates = _as_tensor(tgt.keypoints)[cand_idx]
    parts = [
        _geometric_features(centers, candidates),
        _descriptor_features(src.descriptors, src.uncertainties,
                             tgt.descriptors, tgt.uncertainties, cand_idx),
    ]
    if matrices is not None:
        rows = np.repeat(np.arange(m), k_candidates)
        cols = cand_idx.reshape(-1)
        sim = assemble_similarity_features(list(zip(rows, cols)), matrices)
        parts.append(sim.reshape(m, k_candidates, 4))
    return CorrespondenceClusters(centers, cand_idx, candidates,
                                  concat(parts, axis=2))


def build_fine_clusters(src, tgt, prior_rotation, prior_translation,
                        k_candidates: int) -> CorrespondenceClusters:
    """Clusters from spatial kNN around the prior-transformed source keypoints."""
    if k_candidates > tgt.keypoints.shape[0]:
        raise ValueError("more candidates requested than target keypoints")
    moved = transform_points(_as_tensor(src.keypoints), prior_rotation,
                             prior_translation)
    index = build_index(tgt.keypoints.data)
    cand_idx, _ = knn_spatial_batch(index, moved.data, k_candidates)
    candidates = _as_tensor(tgt.keypoints)[cand_idx]
    features = concat([
        _geometric_features(moved, candidates),
        _descriptor_features(src.descriptors, src.uncertainties,
                             tgt.descriptors, tgt.uncertainties, cand_idx),
    ], axis=2)
    return CorrespondenceClusters(moved, cand_idx, candidates, features)


def correspondence_forward(clusters: CorrespondenceClusters, net: CorrespondenceNet):
    """Predict soft targets, confidences and attention for every cluster.

    Returns (soft_targets (M,3), confidence (M,), attention (M,K)).
    """
    if not np.all(np.isfinite(clusters.features.data)):
        raise ValueError("cluster features contain non-finite values")
    m, k = clusters.candidate_indices.shape
    f = net.trunk(clusters.features)                       # (M, K, H)
    pooled = f.max(axis=1, keepdims=True)                  # (M, 1, H)
    context = pooled + Tensor(np.zeros((m, k, 1)))
    logits = net.scorer(concat([f, context], axis=2))      # (M, K, 1)
    attn = softmax(logits.reshape(m, k), axis=1)
    soft = (attn.reshape(m, k, 1) * clusters.candidates).sum(axis=1)
    pooled_feat = (attn.reshape(m, k, 1) * f).sum(axis=1)  # attentive feature
    conf = net.confidence(pooled_feat).reshape(m).sigmoid()
    return soft, conf, attn


def normalize_confidence(confidences):
    """Scale confidences to sum to one; uniform fallback when all are zero."""
    c = _as_tensor(confidences)
    if np.any(c.data < 0):
        raise ValueError("confidences must be nonnegative")
    total = float(c.data.sum())
    if total <= 0.0:
        warnings.warn("all-zero confidences, falling back to uniform",
                      RuntimeWarning, stacklevel=2)
        return Tensor(np.full(c.shape, 1.0 / c.data.size))
    return c / c.sum()
