"""Tests for the correspondence network and the weighted Kabsch solver."""

import numpy as np
import pytest

from hierreg.correspondence import (build_coarse_clusters, build_fine_clusters,
                                    correspondence_forward,
                                    init_correspondence_net, kabsch_backward,
                                    kabsch_transform, normalize_confidence,
                                    rotation_from_covariance,
                                    solve_weighted_kabsch, transform_points)
from hierreg.engine import Tensor
from hierreg.features import KeypointSet
from hierreg.geometry import RigidTransform
from hierreg.nn import gradcheck

rng = np.random.default_rng(13)


def random_rotation(r=None):
    return RigidTransform.from_axis_angle((r or rng).normal(size=3),
                                          (r or rng).uniform(-179, 179)).rotation


def make_keypoint_set(m=12, c=8, seed=0):
    r = np.random.default_rng(seed)
    d = r.normal(size=(m, c))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return KeypointSet(Tensor(r.normal(size=(m, 3))), Tensor(d),
                       Tensor(r.uniform(0.5, 1.5, size=m)))


def twin_sets(m=12, c=8, seed=0):
    src = make_keypoint_set(m, c, seed)
    tgt = KeypointSet(Tensor(src.keypoints.data.copy()),
                      Tensor(src.descriptors.data.copy()),
                      Tensor(src.uncertainties.data.copy()))
    return src, tgt


# -- weighted Kabsch -------------------------------------------------------

def test_kabsch_identity_on_equal_sets():
    pts = rng.normal(size=(10, 3))
    tf = kabsch_transform(pts, pts, np.ones(10))
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(tf.translation, 0.0, atol=1e-9)


def test_kabsch_pure_translation():
    pts = rng.normal(size=(8, 3))
    tf = kabsch_transform(pts, pts + [1.0, 2.0, 3.0], np.ones(8))
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(tf.translation, [1.0, 2.0, 3.0], atol=1e-9)


def test_kabsch_z_rotation_tetrahedron():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    tf = kabsch_transform(pts, pts @ rz.T, np.ones(4))
    np.testing.assert_allclose(tf.rotation, rz, atol=1e-9)
    np.testing.assert_allclose(tf.translation, 0.0, atol=1e-9)


def test_kabsch_zero_weight_outlier_inert():
    pts = rng.normal(size=(9, 3))
    r = random_rotation()
    t = np.array([0.5, -1.0, 2.0])
    tgt = pts @ r.T + t
    base = kabsch_transform(pts, tgt, np.ones(9))
    src2 = np.vstack([pts, [100.0, 100.0, 100.0]])
    tgt2 = np.vstack([tgt, [-50.0, 3.0, 7.0]])
    w2 = np.concatenate([np.ones(9), [0.0]])
    out = kabsch_transform(src2, tgt2, w2)
    np.testing.assert_allclose(out.rotation, base.rotation, atol=1e-9)
    np.testing.assert_allclose(out.translation, base.translation, atol=1e-9)


def test_kabsch_rotation_always_proper():
    for seed in range(10):
        r = np.random.default_rng(seed)
        tf = kabsch_transform(r.normal(size=(5, 3)), r.normal(size=(5, 3)),
                              r.uniform(0.1, 1, size=5))
        np.testing.assert_allclose(tf.rotation @ tf.rotation.T, np.eye(3),
                                   atol=1e-6)
        assert np.linalg.det(tf.rotation) == pytest.approx(1.0, abs=1e-6)


def test_kabsch_equivariance_under_source_motion():
    pts = rng.normal(size=(7, 3))
    w = rng.uniform(0.2, 1.0, size=7)
    tgt = rng.normal(size=(7, 3))
    base = kabsch_transform(pts, tgt, w)
    g = RigidTransform(random_rotation(), rng.normal(size=3))
    moved = g.apply(pts)
    out = kabsch_transform(moved, tgt, w)
    # solving from G-moved sources equals base composed with G^-1
    np.testing.assert_allclose(out.rotation, base.rotation @ g.rotation.T,
                               atol=1e-9)
    recon = out.rotation @ g.translation + out.translation
    np.testing.assert_allclose(recon, base.translation, atol=1e-9)


def test_kabsch_beats_random_rotations():
    r = np.random.default_rng(2)
    src = r.normal(size=(5, 3))
    tgt = r.normal(size=(5, 3))
    w = r.uniform(0.1, 1.0, size=5)
    wn = w / w.sum()
    tf = kabsch_transform(src, tgt, w)

    def residual(rot):
        t = (wn[:, None] * (tgt - src @ rot.T)).sum(axis=0)
        return (wn * ((src @ rot.T + t - tgt) ** 2).sum(axis=1)).sum()

    best = residual(tf.rotation)
    for seed in range(10000):
        assert best <= residual(random_rotation(np.random.default_rng(seed))) \
            + 1e-12


def test_kabsch_rejects_bad_inputs():
    with pytest.raises(ValueError):
        solve_weighted_kabsch(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        solve_weighted_kabsch(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros(4))
    with pytest.raises(ValueError):
        solve_weighted_kabsch(np.zeros((4, 3)), np.zeros((4, 3)),
                              np.array([1.0, 1, 1, -1]))


def test_kabsch_degenerate_warns():
    line = np.stack([np.arange(4.0), np.zeros(4), np.zeros(4)], axis=1)
    with pytest.warns(RuntimeWarning):
        kabsch_transform(line, line + 1.0, np.ones(4))


# -- Kabsch gradients ------------------------------------------------------

def test_kabsch_backward_zero_at_optimum():
    pts = rng.normal(size=(6, 3))
    r = random_rotation()
    t = rng.normal(size=3)
    tgt = pts @ r.T + t
    w = np.ones(6)
    # loss ||t_hat - t||^2 is minimized exactly; gradient on inputs vanishes
    rr, tt = solve_weighted_kabsch(Tensor(pts, requires_grad=True),
                                   Tensor(tgt), Tensor(w))
    d_src, d_tgt, d_w = kabsch_backward(
        pts, tgt, w, np.zeros((3, 3)), 2.0 * (tt.data - t))
    np.testing.assert_allclose(d_src, 0.0, atol=1e-7)
    np.testing.assert_allclose(d_tgt, 0.0, atol=1e-7)


def test_kabsch_translation_gradient_hand_oracle():
    # weighted-centered src, tgt = src + t: then t = weighted mean of tgt
    # and dt/d(tgt_i) = w_i I after normalization (the -dR mu_x term is 0)
    w = rng.uniform(0.5, 2.0, size=5)
    wn = w / w.sum()
    pts = rng.normal(size=(5, 3))
    pts = pts - (wn[:, None] * pts).sum(axis=0)
    for axis in range(3):
        g = np.zeros(3)
        g[axis] = 1.0
        _, d_tgt, _ = kabsch_backward(pts, pts + [1.0, 2.0, 3.0], w,
                                      np.zeros((3, 3)), g)
        np.testing.assert_allclose(d_tgt[:, axis], wn, atol=1e-6)


def test_kabsch_finite_difference_agreement():
    for seed in range(5):
        r = np.random.default_rng(seed)
        src = r.normal(size=(6, 3))
        tgt = r.normal(size=(6, 3)) * 0.5 + src
        w = r.uniform(0.3, 1.0, size=6)
        tstar = r.normal(size=3)

        def fn(x, y, ww):
            rr, tt = solve_weighted_kabsch(x, y, ww)
            return ((tt - Tensor(tstar)) ** 2).sum() + (rr * rr).sum()

        rep = gradcheck(fn, [src, tgt, w], tol=1e-3, h=1e-6)
        assert rep.passed, (seed, rep.max_rel_err)


def test_rotation_from_covariance_gradcheck():
    h = rng.normal(size=(3, 3))

    def fn(x):
        return (rotation_from_covariance(x) * Tensor(np.arange(9.0).reshape(3, 3))).sum()

    rep = gradcheck(fn, [h], tol=1e-4, h=1e-6)
    assert rep.passed, rep.max_rel_err


# -- cluster construction --------------------------------------------------

def test_coarse_clusters_twin_first_candidate():
    src, tgt = twin_sets()
    clusters = build_coarse_clusters(src, tgt, 3)
    np.testing.assert_array_equal(clusters.candidate_indices[:, 0],
                                  np.arange(len(clusters)))


def test_coarse_clusters_feature_width():
    src, tgt = twin_sets(m=10, c=8)
    clusters = build_coarse_clusters(src, tgt, 4)
    # 10 geometric + 2C descriptor + 2 uncertainty columns
    assert clusters.features.shape == (10, 4, 10 + 16 + 2)


def test_coarse_clusters_match_descriptor_oracle():
    src = make_keypoint_set(16, 6, seed=1)
    tgt = make_keypoint_set(16, 6, seed=2)
    clusters = build_coarse_clusters(src, tgt, 5)
    d = np.linalg.norm(src.descriptors.data[:, None]
                       - tgt.descriptors.data[None], axis=2)
    oracle = np.argsort(d, axis=1, kind="stable")[:, :5]
    np.testing.assert_array_equal(clusters.candidate_indices, oracle)


def test_coarse_clusters_reject_large_k():
    src, tgt = twin_sets(m=4)
    with pytest.raises(ValueError):
        build_coarse_clusters(src, tgt, 5)


def test_fine_clusters_truth_prior_hits_twin():
    src, tgt = twin_sets(m=14)
    g = RigidTransform(random_rotation(), rng.normal(size=3))
    # target = g(src); prior = g brings the source onto the target exactly
    tgt_moved = KeypointSet(Tensor(g.apply(src.keypoints.data)),
                            tgt.descriptors, tgt.uncertainties)
    clusters = build_fine_clusters(src, tgt_moved, g.rotation, g.translation, 3)
    np.testing.assert_array_equal(clusters.candidate_indices[:, 0],
                                  np.arange(14))


def test_fine_clusters_have_no_similarity_columns():
    src, tgt = twin_sets(m=10, c=8)
    clusters = build_fine_clusters(src, tgt, np.eye(3), np.zeros(3), 4)
    assert clusters.features.shape[2] == 10 + 16 + 2


def test_fine_clusters_match_spatial_oracle():
    src = make_keypoint_set(20, 4, seed=3)
    tgt = make_keypoint_set(20, 4, seed=4)
    g = RigidTransform(random_rotation(), rng.normal(size=3))
    clusters = build_fine_clusters(src, tgt, g.rotation, g.translation, 6)
    moved = g.apply(src.keypoints.data)
    d = np.linalg.norm(moved[:, None] - tgt.keypoints.data[None], axis=2)
    oracle = np.argsort(d, axis=1, kind="stable")[:, :6]
    np.testing.assert_array_equal(clusters.candidate_indices, oracle)


def test_transform_points_matches_geometry():
    pts = rng.normal(size=(10, 3))
    g = RigidTransform(random_rotation(), rng.normal(size=3))
    out = transform_points(Tensor(pts), g.rotation, g.translation)
    np.testing.assert_allclose(out.data, g.apply(pts), atol=1e-12)


# -- correspondence forward ------------------------------------------------

def test_forward_k1_returns_sole_candidate():
    src, tgt = twin_sets(m=8, c=6)
    clusters = build_coarse_clusters(src, tgt, 1)
    net = init_correspondence_net(clusters.features.shape[2],
                                  np.random.default_rng(0))
    soft, conf, attn = correspondence_forward(clusters, net)
    np.testing.assert_allclose(attn.data, 1.0)
    np.testing.assert_allclose(soft.data, clusters.candidates.data[:, 0])


def test_forward_equal_logits_centroid():
    src, tgt = twin_sets(m=8, c=6)
    clusters = build_coarse_clusters(src, tgt, 4)
    net = init_correspondence_net(clusters.features.shape[2],
                                  np.random.default_rng(0))
    for w in net.scorer.weights:
        w.data = np.zeros_like(w.data)
    for b in net.scorer.biases:
        b.data = np.zeros_like(b.data)
    soft, _, attn = correspondence_forward(clusters, net)
    np.testing.assert_allclose(attn.data, 0.25, atol=1e-12)
    np.testing.assert_allclose(soft.data, clusters.candidates.data.mean(axis=1),
                               atol=1e-9)


def test_forward_outputs_well_formed():
    src = make_keypoint_set(10, 8, seed=5)
    tgt = make_keypoint_set(10, 8, seed=6)
    clusters = build_coarse_clusters(src, tgt, 4)
    net = init_correspondence_net(clusters.features.shape[2],
                                  np.random.default_rng(1))
    soft, conf, attn = correspondence_forward(clusters, net)
    assert np.all((conf.data > 0) & (conf.data < 1))
    np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-9)
    # soft targets stay in the candidate convex hull (per-axis bounds)
    lo = clusters.candidates.data.min(axis=1)
    hi = clusters.candidates.data.max(axis=1)
    assert np.all(soft.data >= lo - 1e-9) and np.all(soft.data <= hi + 1e-9)


def test_forward_rejects_nonfinite_features():
    src, tgt = twin_sets(m=6, c=4)
    clusters = build_coarse_clusters(src, tgt, 2)
    clusters.features.data[0, 0, 0] = np.nan
    net = init_correspondence_net(clusters.features.shape[2],
                                  np.random.default_rng(0))
    with pytest.raises(ValueError):
        correspondence_forward(clusters, net)


# -- confidence normalization ----------------------------------------------

def test_normalize_confidence_example():
    out = normalize_confidence(np.array([1.0, 1.0, 2.0]))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.5])


def test_normalize_confidence_zero_fallback():
    with pytest.warns(RuntimeWarning):
        out = normalize_confidence(np.zeros(4))
    np.testing.assert_allclose(out.data, 0.25)


def test_normalize_confidence_scale_invariant():
    c = rng.uniform(0.1, 1.0, size=7)
    a = normalize_confidence(c)
    b = normalize_confidence(37.5 * c)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)
    assert a.data.sum() == pytest.approx(1.0, abs=1e-6)


def test_normalize_confidence_rejects_negative():
    with pytest.raises(ValueError):
        normalize_confidence(np.array([0.5, -0.1]))
