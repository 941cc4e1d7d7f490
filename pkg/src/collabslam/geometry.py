"""Rigid-body transforms, plane algebra, and point-cloud utilities.

Everything here is pure value math shared by the graph backend, the simulator
and the descriptor pipeline.  Quaternions use the [x, y, z, w] layout and the
Hamilton product; angles are radians, lengths are meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegeneratePairError(ValueError):
    """A wall pair is parallel same-direction (or otherwise cannot bound a room)."""


# ---------------------------------------------------------------------------
# quaternion helpers (broadcast over leading axes)
# ---------------------------------------------------------------------------


def quat_identity() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b for [x, y, z, w] quaternions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax, ay, az, aw = np.moveaxis(a, -1, 0)
    bx, by, bz, bw = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=float) * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by quaternions q (..., 4)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., :3]
    w = q[..., 3:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_rotvec(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(theta/2)/theta with a series fallback near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / safe)
    xyz = r * k
    w = np.cos(half)
    return np.concatenate([xyz, w], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    # resolve the double cover so the returned angle is minimal
    q = np.where(q[..., 3:4] < 0.0, -q, q)
    u = q[..., :3]
    s = np.linalg.norm(u, axis=-1, keepdims=True)
    w = q[..., 3:4]
    theta = 2.0 * np.arctan2(s, w)
    small = s < 1e-9
    safe = np.where(small, 1.0, s)
    scale = np.where(small, 2.0 / np.maximum(w, 1e-9), theta / safe)
    return u * scale


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (..., 3, 3) from quaternion (..., 4)."""
    q = quat_normalize(q)
    x, y, z, w = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.stack(
        [
            1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
            2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
            2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([0.0, 0.0, np.sin(0.5 * yaw), np.cos(0.5 * yaw)])


def yaw_of_quat(q: np.ndarray) -> float:
    m = quat_to_matrix(q)
    return float(np.arctan2(m[..., 1, 0], m[..., 0, 0]))


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return -((-np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices (..., 3, 3) for vectors (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3) at rotation vectors phi (..., 3)."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    K = skew(phi)
    K2 = K @ K
    small = theta < 1e-5
    safe_t = np.where(small, 1.0, theta)
    safe_t2 = np.where(small, 1.0, theta2)
    c = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        1.0 / safe_t2 - (1.0 + np.cos(safe_t)) / (2.0 * safe_t * np.sin(safe_t)),
    )
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + 0.5 * K + c[..., None, None] * K2


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------


@dataclass
class Pose:
    """SE(3) transform as unit quaternion + translation."""

    q: np.ndarray = field(default_factory=quat_identity)
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = quat_normalize(np.asarray(self.q, dtype=float).reshape(4))
        self.t = np.asarray(self.t, dtype=float).reshape(3).copy()

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_xyz_yaw(x: float, y: float, z: float = 0.0, yaw: float = 0.0) -> "Pose":
        return Pose(quat_from_yaw(yaw), np.array([x, y, z], dtype=float))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        R = m[:3, :3]
        w = np.sqrt(max(0.0, 1.0 + np.trace(R))) / 2.0
        if w > 1e-6:
            q = np.array(
                [(R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w),
                 (R[1, 0] - R[0, 1]) / (4 * w), w]
            )
        else:  # 180 degree rotations: take the dominant axis
            d = np.diag(R)
            k = int(np.argmax(d))
            i, j = (k + 1) % 3, (k + 2) % 3
            s = np.sqrt(max(1e-12, 1.0 + d[k] - d[i] - d[j])) / 2.0
            q = np.zeros(4)
            q[k] = s
            q[i] = (R[i, k] + R[k, i]) / (4 * s)
            q[j] = (R[j, k] + R[k, j]) / (4 * s)
            q[3] = (R[j, i] - R[i, j]) / (4 * s)
        return Pose(q, m[:3, 3])

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.q, other.q), self.t + quat_rotate(self.q, other.t))

    def inverse(self) -> "Pose":
        qc = quat_conj(self.q)
        return Pose(qc, -quat_rotate(qc, self.t))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(pts, dtype=float)) + self.t

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    @property
    def yaw(self) -> float:
        return yaw_of_quat(self.q)

    def copy(self) -> "Pose":
        return Pose(self.q.copy(), self.t.copy())

    def __repr__(self) -> str:
        return f"Pose(t={np.round(self.t, 4)}, yaw={self.yaw:.4f})"


def pose_between(a: Pose, b: Pose) -> Pose:
    """Relative pose taking frame-b coordinates into frame a."""
    return a.inverse().compose(b)


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation, rotation-angle) magnitude of the relative pose a^-1 b."""
    rel = pose_between(a, b)
    return float(np.linalg.norm(rel.t)), float(np.linalg.norm(quat_to_rotvec(rel.q)))


# ---------------------------------------------------------------------------
# planes
# ---------------------------------------------------------------------------


def canonical_plane_vector(n: np.ndarray, d: float) -> tuple[np.ndarray, float]:
    """Canonical sign for (n, d): flip when d > 0; for d == 0 make the first
    nonzero normal component positive."""
    n = np.asarray(n, dtype=float)
    if d > 0.0:
        return -n, -d
    if d == 0.0:
        for c in n:
            if c != 0.0:
                if c < 0.0:
                    return -n, -0.0 + 0.0
                break
    return n, d


def tangent_basis(n: np.ndarray) -> np.ndarray:
    """Orthonormal basis (3, 2) of the tangent plane at unit vector n."""
    n = np.asarray(n, dtype=float)
    k = int(np.argmin(np.abs(n)))
    e = np.zeros(3)
    e[k] = 1.0
    b1 = np.cross(n, e)
    b1 = b1 / np.linalg.norm(b1)
    b2 = np.cross(n, b1)
    return np.stack([b1, b2], axis=-1)


def tangent_basis_batch(n: np.ndarray) -> np.ndarray:
    """Batched tangent_basis for normals (N, 3) -> (N, 3, 2)."""
    n = np.asarray(n, dtype=float)
    k = np.argmin(np.abs(n), axis=-1)
    e = np.zeros_like(n)
    e[np.arange(len(n)), k] = 1.0
    b1 = np.cross(n, e)
    b1 = b1 / np.linalg.norm(b1, axis=-1, keepdims=True)
    b2 = np.cross(n, b1)
    return np.stack([b1, b2], axis=-1)


@dataclass
class Plane:
    """Plane {p : n.p + d = 0} with unit normal and optional 3x3 covariance
    over the minimal (2 tangent + 1 offset) parameterization."""

    normal: np.ndarray
    offset: float
    covariance: np.ndarray | None = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3).copy()
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ValueError("plane normal must be nonzero")
        if abs(norm - 1.0) > 1e-12:  # keep already-unit normals bit-exact
            n = n / norm
        self.normal = n
        self.offset = float(self.offset)
        if self.covariance is not None:
            self.covariance = np.asarray(self.covariance, dtype=float).reshape(3, 3)

    def canonical(self) -> "Plane":
        n, d = canonical_plane_vector(self.normal, self.offset)
        return Plane(n, d, self.covariance)

    def distance(self, p: np.ndarray) -> np.ndarray:
        """Signed distance(s) of point(s) p to the plane."""
        return np.asarray(p, dtype=float) @ self.normal + self.offset

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.offset, self.covariance)

    def copy(self) -> "Plane":
        cov = None if self.covariance is None else self.covariance.copy()
        return Plane(self.normal.copy(), self.offset, cov)

    def __repr__(self) -> str:
        return f"Plane(n={np.round(self.normal, 4)}, d={self.offset:.4f})"


def make_plane(normal, offset, covariance=None) -> Plane:
    """Canonicalized plane from raw (normal, offset)."""
    return Plane(normal, offset, covariance).canonical()


def transform_plane(T: Pose, plane: Plane) -> Plane:
    """Re-express a plane from frame A in frame B where T maps A points to B.

    n_B = R n_A, d_B = d_A - n_B . t; the result is canonicalized.
    """
    n = quat_rotate(T.q, plane.normal)
    d = plane.offset - float(n @ T.t)
    return Plane(n, d, plane.covariance).canonical()


def plane_gap(a: Plane, b: Plane) -> tuple[float, float]:
    """(normal angle, offset difference) after matching hemispheres."""
    dot = float(a.normal @ b.normal)
    sign = 1.0 if dot >= 0.0 else -1.0
    angle = float(np.arccos(np.clip(sign * dot, -1.0, 1.0)))
    doff = abs(a.offset - sign * b.offset)
    return angle, doff


def room_center_from_walls(walls: list[Plane]) -> np.ndarray:
    """Analytic planar center of a four-wall room.

    Walls are inward-oriented and ordered pair-first: (w1, w2) bound one axis,
    (w3, w4) the other.  Each pair must be anti-parallel within 30 degrees;
    a same-direction pair cannot bound a room and raises DegeneratePairError.
    """
    if len(walls) != 4:
        raise ValueError("room center needs exactly 4 walls")
    cos_tol = np.cos(np.deg2rad(30.0))
    rows = np.zeros((2, 2))
    rhs = np.zeros(2)
    for k, (p, q) in enumerate(((walls[0], walls[1]), (walls[2], walls[3]))):
        if float(p.normal @ q.normal) > -cos_tol:
            raise DegeneratePairError(
                f"wall pair {k} is not anti-parallel within 30 deg"
            )
        v = (p.normal - q.normal)[:2]
        nv = np.linalg.norm(v)
        if nv < 1e-9:
            raise DegeneratePairError(f"wall pair {k} has no horizontal axis")
        rows[k] = v / nv
        rhs[k] = 0.5 * (q.offset - p.offset)
    det = rows[0, 0] * rows[1, 1] - rows[0, 1] * rows[1, 0]
    if abs(det) < 0.5:  # pairs must be roughly perpendicular
        raise DegeneratePairError("wall pairs are nearly parallel")
    return np.linalg.solve(rows, rhs)


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    """Points (N, 3) tagged with the id of the frame they are expressed in."""

    points: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def empty(self) -> bool:
        return self.points.shape[0] == 0


def transform_cloud(T: Pose, cloud: PointCloud, frame_id: str = "") -> PointCloud:
    if cloud.empty:
        return PointCloud(cloud.points.copy(), frame_id)
    return PointCloud(T.apply(cloud.points), frame_id)


def voxel_downsample_points(points: np.ndarray, voxel: float) -> np.ndarray:
    """Centroid per occupied voxel; output ordered by voxel index."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        return points.copy()
    idx = np.floor(points / voxel).astype(np.int64)
    _, inv, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inv, points)
    return sums / counts[:, None]


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    return PointCloud(voxel_downsample_points(cloud.points, voxel), cloud.frame_id)
