"""Core 3D types, rigid-transform algebra, preprocessing and metrics."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PointCloud", "RigidTransform", "RegistrationMetrics",
    "apply_transform", "compose", "invert",
    "voxel_downsample", "random_subsample",
    "rte", "rre", "recall", "evaluate",
    "load_cloud", "save_cloud_text", "save_cloud_binary",
    "CLOUD_MAGIC",
]

CLOUD_MAGIC = b"PCB1"
_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points, shape (N, 3)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """Rotation matrix + translation vector with orthonormality enforced."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite entries")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=_ORTHO_TOL):
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, degrees, translation=(0, 0, 0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        th = np.deg2rad(degrees)
        kx, ky, kz = axis
        k = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
        r = np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * (k @ k)
        return RigidTransform(r, np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class RegistrationMetrics:
    """Translation/rotation error for one registration, plus the success flag."""

    rte: float
    rre: float
    success: bool


def apply_transform(cloud: PointCloud, tf: RigidTransform) -> PointCloud:
    """Map every point p to R p + t."""
    return PointCloud(tf.apply(cloud.points))


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying `inner` first, then `outer`."""
    return RigidTransform(outer.rotation @ inner.rotation,
                          outer.rotation @ inner.translation + outer.translation)


def invert(tf: RigidTransform) -> RigidTransform:
    rt = tf.rotation.T
    return RigidTransform(rt, -rt @ tf.translation)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace each occupied voxel by the centroid of its member points.

    The voxel index is floor(coordinate / voxel_size) per axis; output
    points are ordered by voxel index.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return cloud
    cells = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True,
                                   return_counts=True)
    sums = np.zeros((counts.size, 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None])


def random_subsample(cloud: PointCloud, count: int, seed: int) -> PointCloud:
    """Uniform subset without replacement; identity when the cloud is small."""
    if count < 1:
        raise ValueError("count must be >= 1")
    n = len(cloud)
    if n <= count:
        return cloud
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    return PointCloud(cloud.points[idx])


def rte(estimate: RigidTransform, truth: RigidTransform) -> float:
    """Relative translation error: Euclidean norm of the translation gap."""
    return float(np.linalg.norm(truth.translation - estimate.translation))


def rre(estimate: RigidTransform, truth: RigidTransform) -> float:
    """Relative rotation error in degrees (geodesic angle between rotations).

    arccos((tr(R^T R') - 1) / 2) with the argument clamped to [-1, 1]; near
    identity the equivalent 2 asin(||R - R'||_F / (2 sqrt 2)) form is used
    because arccos loses precision there.
    """
    c = (np.trace(estimate.rotation.T @ truth.rotation) - 1.0) / 2.0
    if c > 1.0 - 1e-9:
        fro = np.linalg.norm(estimate.rotation - truth.rotation)
        return float(np.degrees(2.0 * np.arcsin(min(1.0, fro / (2.0 * np.sqrt(2.0))))))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def evaluate(estimate: RigidTransform, truth: RigidTransform,
             eps_trans: float, eps_rot: float) -> RegistrationMetrics:
    t, r = rte(estimate, truth), rre(estimate, truth)
    return RegistrationMetrics(t, r, t <= eps_trans and r <= eps_rot)


def recall(metrics, eps_trans: float, eps_rot: float) -> float:
    """Fraction of registrations with both errors within the thresholds."""
    metrics = list(metrics)
    if not metrics:
        raise ValueError("recall of an empty metrics list is undefined")
    ok = sum(1 for m in metrics if m.rte <= eps_trans and m.rre <= eps_rot)
    return ok / len(metrics)


# -- point cloud file formats ---------------------------------------------


def save_cloud_text(path, cloud: PointCloud):
    """ASCII format: one point per line, three whitespace-separated floats."""
    with open(path, "w") as f:
        for x, y, z in cloud.points:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def save_cloud_binary(path, cloud: PointCloud):
    """Binary format: "PCB1", uint32 LE count, count x 3 float32 LE."""
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<I", len(cloud)))
        f.write(cloud.points.astype("<f4").tobytes(order="C"))


def load_cloud(path) -> PointCloud:
    """Load either cloud format, sniffing the binary magic bytes."""
    with open(path, "rb") as f:
        head = f.read(4)
        if head == CLOUD_MAGIC:
            count, = struct.unpack("<I", f.read(4))
            data = np.frombuffer(f.read(12 * count), dtype="<f4")
            if data.size != 3 * count:
                raise ValueError("truncated binary point cloud")
            return PointCloud(data.reshape(count, 3).astype(np.float64))
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.size and pts.shape[1] != 3:
        raise ValueError("text point cloud must have three columns")
    return PointCloud(pts.reshape(-1, 3))
