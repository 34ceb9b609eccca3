"""Tests for geometry types, preprocessing and metrics."""

import numpy as np
import pytest

from hierreg.geometry import (PointCloud, RegistrationMetrics, RigidTransform,
                              apply_transform, compose, evaluate, invert,
                              load_cloud, random_subsample, recall, rre, rte,
                              save_cloud_binary, save_cloud_text,
                              voxel_downsample)

rng = np.random.default_rng(11)


def random_transform(r=None):
    r = r or rng
    return RigidTransform.from_axis_angle(r.normal(size=3),
                                          r.uniform(-180, 180),
                                          r.normal(size=3))


# -- transforms ------------------------------------------------------------

def test_apply_identity_is_noop():
    cloud = PointCloud(rng.normal(size=(20, 3)))
    out = apply_transform(cloud, RigidTransform.identity())
    np.testing.assert_array_equal(out.points, cloud.points)


def test_apply_pure_translation():
    cloud = PointCloud([[0.0, 0.0, 0.0]])
    tf = RigidTransform(np.eye(3), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(apply_transform(cloud, tf).points,
                               [[1.0, 2.0, 3.0]])


def test_apply_rotation_90_about_z():
    tf = RigidTransform.from_axis_angle([0, 0, 1], 90.0)
    out = apply_transform(PointCloud([[1.0, 0.0, 0.0]]), tf)
    # oracle: direct matrix product with the exact 90-degree matrix
    oracle = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(out.points[0], oracle @ [1.0, 0.0, 0.0],
                               atol=1e-12)
    np.testing.assert_allclose(out.points[0], [0.0, 1.0, 0.0], atol=1e-12)


def test_apply_rejects_nonfinite_points():
    with pytest.raises(ValueError):
        PointCloud([[np.inf, 0, 0]])


def test_compose_identity_and_translations():
    t = random_transform()
    ident = RigidTransform.identity()
    np.testing.assert_allclose(compose(ident, t).rotation, t.rotation)
    np.testing.assert_allclose(compose(ident, t).translation, t.translation)
    a = RigidTransform(np.eye(3), [1, 0, 0])
    b = RigidTransform(np.eye(3), [0, 1, 0])
    np.testing.assert_allclose(compose(a, b).translation, [1, 1, 0])


def test_compose_matches_sequential_application():
    a, b = random_transform(), random_transform()
    pts = rng.normal(size=(100, 3))
    lhs = compose(a, b).apply(pts)
    rhs = a.apply(b.apply(pts))
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_invert_round_trip():
    ident = invert(RigidTransform.identity())
    np.testing.assert_allclose(ident.translation, np.zeros(3))
    t = RigidTransform(np.eye(3), [1.0, -2.0, 3.0])
    np.testing.assert_allclose(invert(t).translation, [-1.0, 2.0, -3.0])
    g = random_transform()
    pts = rng.normal(size=(50, 3))
    np.testing.assert_allclose(invert(g).apply(g.apply(pts)), pts, atol=1e-9)


def test_transform_group_laws():
    for _ in range(10):
        a, b, c = (random_transform() for _ in range(3))
        pts = rng.normal(size=(20, 3))
        lhs = compose(compose(a, b), c).apply(pts)
        rhs = compose(a, compose(b, c)).apply(pts)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)
        round_trip = compose(a, invert(a))
        np.testing.assert_allclose(round_trip.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(round_trip.translation, 0, atol=1e-9)


def test_rigidity_preserves_pairwise_distances():
    pts = rng.normal(size=(30, 3))
    moved = random_transform().apply(pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
    d1 = np.linalg.norm(moved[:, None] - moved[None, :], axis=2)
    np.testing.assert_allclose(d0, d1, atol=1e-9)


def test_invalid_rotation_rejected():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


# -- preprocessing ---------------------------------------------------------

def test_voxel_centroid_of_pair():
    cloud = PointCloud([[0.1, 0, 0], [0.2, 0, 0]])
    out = voxel_downsample(cloud, 0.3)
    assert len(out) == 1
    np.testing.assert_allclose(out.points[0], [0.15, 0.0, 0.0])


def test_voxel_keeps_separated_points():
    cloud = PointCloud([[0, 0, 0], [1, 1, 1], [2, 0, 0]])
    assert len(voxel_downsample(cloud, 0.3)) == 3


def test_voxel_one_point_per_occupied_cell():
    pts = rng.uniform(0, 1, size=(1000, 3))
    out = voxel_downsample(PointCloud(pts), 0.5)
    # independent cell-hashing oracle
    cells = {tuple(c) for c in np.floor(pts / 0.5).astype(int)}
    assert len(out) == len(cells)
    out_cells = [tuple(c) for c in np.floor(out.points / 0.5).astype(int)]
    assert len(set(out_cells)) == len(out_cells)


def test_voxel_idempotent():
    pts = rng.uniform(-2, 2, size=(500, 3))
    once = voxel_downsample(PointCloud(pts), 0.4)
    twice = voxel_downsample(once, 0.4)
    np.testing.assert_allclose(np.sort(once.points, axis=0),
                               np.sort(twice.points, axis=0), atol=1e-12)


def test_voxel_rejects_bad_size():
    with pytest.raises(ValueError):
        voxel_downsample(PointCloud(np.zeros((1, 3))), 0.0)


def test_subsample_identity_when_small():
    cloud = PointCloud(rng.normal(size=(10, 3)))
    out = random_subsample(cloud, 20, seed=1)
    np.testing.assert_array_equal(out.points, cloud.points)


def test_subsample_deterministic():
    cloud = PointCloud(rng.normal(size=(100, 3)))
    a = random_subsample(cloud, 30, seed=5)
    b = random_subsample(cloud, 30, seed=5)
    np.testing.assert_array_equal(a.points, b.points)
    c = random_subsample(cloud, 30, seed=6)
    assert not np.array_equal(a.points, c.points)


def test_subsample_uniformity_chi_square():
    # 1000 seeds picking 1 of 10 bins; chi-square vs the 99% quantile (21.67)
    cloud = PointCloud(np.arange(30).reshape(10, 3).astype(float))
    counts = np.zeros(10)
    for seed in range(1000):
        picked = random_subsample(cloud, 1, seed=seed).points[0]
        counts[int(picked[0]) // 3] += 1
    chi2 = ((counts - 100.0) ** 2 / 100.0).sum()
    assert chi2 < 21.67


# -- metrics ---------------------------------------------------------------

def test_rte_examples():
    t = random_transform()
    assert rte(t, t) == 0.0
    a = RigidTransform(np.eye(3), [0, 0, 0])
    b = RigidTransform(np.eye(3), [3, 4, 0])
    assert rte(a, b) == pytest.approx(5.0)


def test_rte_matches_norm_oracle():
    for _ in range(20):
        a, b = random_transform(), random_transform()
        oracle = np.sqrt(((a.translation - b.translation) ** 2).sum())
        assert abs(rte(a, b) - oracle) < 1e-12


def test_rre_examples():
    t = random_transform()
    assert rre(t, t) < 1e-9
    a = RigidTransform.identity()
    b = RigidTransform.from_axis_angle([0, 0, 1], 10.0)
    assert rre(a, b) == pytest.approx(10.0, abs=1e-9)


def test_rre_axis_angle_oracle():
    for _ in range(20):
        axis = rng.normal(size=3)
        angle = rng.uniform(0.1, 179.0)
        a = RigidTransform.identity()
        b = RigidTransform.from_axis_angle(axis, angle)
        assert rre(a, b) == pytest.approx(angle, abs=1e-6)


def test_rre_symmetric_and_bounded():
    for _ in range(20):
        a, b = random_transform(), random_transform()
        assert abs(rre(a, b) - rre(b, a)) < 1e-9
        assert 0.0 <= rre(a, b) <= 180.0


def test_recall_counts():
    ms = [RegistrationMetrics(0.0, 0.0, True)] * 4
    assert recall(ms, 1, 1) == 1.0
    ms = ms[:3] + [RegistrationMetrics(5.0, 0.0, False)]
    assert recall(ms, 1, 1) == 0.75
    with pytest.raises(ValueError):
        recall([], 1, 1)


def test_recall_monotone_in_thresholds():
    ms = [RegistrationMetrics(rng.uniform(0, 2), rng.uniform(0, 10), True)
          for _ in range(50)]
    # brute-force counting oracle over a threshold sweep
    prev = -1.0
    for eps_t in np.linspace(0, 2, 11):
        cur = recall(ms, eps_t, 5.0)
        oracle = sum(1 for m in ms if m.rte <= eps_t and m.rre <= 5.0) / 50
        assert cur == pytest.approx(oracle)
        assert cur >= prev
        prev = cur
    prev = -1.0
    for eps_r in np.linspace(0, 10, 11):
        cur = recall(ms, 1.0, eps_r)
        assert cur >= prev
        prev = cur


def test_evaluate_success_definition():
    a = RigidTransform.identity()
    b = RigidTransform.from_axis_angle([0, 0, 1], 3.0, [0.2, 0, 0])
    m = evaluate(a, b, 0.5, 5.0)
    assert m.success and m.rte == pytest.approx(0.2) and \
        m.rre == pytest.approx(3.0)
    assert not evaluate(a, b, 0.1, 5.0).success


# -- file formats ----------------------------------------------------------

def test_text_round_trip(tmp_path):
    cloud = PointCloud(rng.normal(size=(17, 3)))
    path = tmp_path / "cloud.txt"
    save_cloud_text(path, cloud)
    out = load_cloud(path)
    np.testing.assert_array_equal(out.points, cloud.points)


def test_binary_round_trip(tmp_path):
    cloud = PointCloud(rng.normal(size=(17, 3)).astype(np.float32))
    path = tmp_path / "cloud.pcb"
    save_cloud_binary(path, cloud)
    out = load_cloud(path)
    np.testing.assert_array_equal(out.points, cloud.points)
    with open(path, "rb") as f:
        assert f.read(4) == b"PCB1"


def test_binary_truncation_detected(tmp_path):
    path = tmp_path / "cloud.pcb"
    save_cloud_binary(path, PointCloud(rng.normal(size=(5, 3))))
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(ValueError):
        load_cloud(path)
