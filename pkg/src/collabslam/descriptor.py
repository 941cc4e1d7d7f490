"""Room-centric clouds, polar-grid room descriptors, matching, registration.

A room descriptor is a sectors x rings matrix of per-bin maximum heights
computed from the voxel-downsampled room-centric cloud.  Descriptor distance
is shift-minimized mean column cosine dissimilarity, which makes it invariant
to the yaw of the room frame up to the sector resolution.  Matched rooms are
fine-aligned by planar registration of their clouds against a voxelized
Gaussian model of the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, quat_from_yaw


class ConfigMismatchError(ValueError):
    """Descriptors were built with different grid configurations."""


class EmptyRoomCloudError(RuntimeError):
    """No points survived assembly/cropping of a room cloud."""


class AlignmentRejectedError(RuntimeError):
    """Registration fitness exceeded the acceptance threshold."""

    def __init__(self, fitness: float, pose: Pose | None = None):
        super().__init__(f"registration fitness {fitness:.4f} above threshold")
        self.fitness = fitness
        self.pose = pose


@dataclass
class DescriptorConfig:
    n_sectors: int = 60
    n_rings: int = 20
    max_radius: float = 10.0
    voxel: float = 0.1


@dataclass
class RoomFrame:
    """Planar frame at the room center; x axis along the first wall pair."""

    center: np.ndarray
    yaw: float
    floor_z: float = 0.0  # z of the floor plane in the map frame

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        self.yaw = float(self.yaw)

    def pose(self) -> Pose:
        """Map-from-room transform; room z is measured from the floor."""
        return Pose(quat_from_yaw(self.yaw),
                    np.array([self.center[0], self.center[1], self.floor_z]))


@dataclass
class RoomDescriptor:
    owner: int
    room_index: int
    matrix: np.ndarray  # (n_sectors, n_rings) float32, 0 encodes an empty bin
    extents: np.ndarray
    frame_yaw: float
    n_sectors: int = 60
    n_rings: int = 20
    max_radius: float = 10.0

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32).reshape(
            self.n_sectors, self.n_rings
        )
        self.extents = np.asarray(self.extents, dtype=np.float32).reshape(2)


@dataclass
class RoomMatch:
    """An accepted inter-robot room association."""

    local_room: int
    peer: int
    peer_room: int
    sc_distance: float
    yaw_seed: float
    alignment: Pose | None = None
    fitness: float | None = None


@dataclass
class MatchCandidate:
    local_room: int
    peer: int
    peer_room: int
    distance: float
    shift: int
    yaw_seed: float


# ---------------------------------------------------------------------------
# room cloud assembly
# ---------------------------------------------------------------------------


def build_room_cloud(frame: RoomFrame, extents, member_scans, margin: float = 1.0) -> np.ndarray:
    """Union of member keyframe scans expressed in the room frame.

    member_scans: iterable of (keyframe pose in map frame, body-frame points).
    Points farther than extents/2 + margin from the center are cropped; room z
    is measured from the floor plane.
    """
    inv = frame.pose().inverse()
    extents = np.asarray(extents, dtype=float)
    parts = []
    for pose, pts in member_scans:
        if len(pts) == 0:
            continue
        parts.append(inv.compose(pose).apply(pts))
    if not parts:
        raise EmptyRoomCloudError("room has no scan points")
    cloud = np.concatenate(parts, axis=0)
    half = extents / 2.0 + margin
    keep = (np.abs(cloud[:, 0]) <= half[0]) & (np.abs(cloud[:, 1]) <= half[1])
    cloud = cloud[keep]
    if cloud.shape[0] == 0:
        raise EmptyRoomCloudError("crop removed all room points")
    return cloud


# ---------------------------------------------------------------------------
# descriptor construction and distance
# ---------------------------------------------------------------------------


def scan_context_matrix(points: np.ndarray, n_sectors: int, n_rings: int,
                        max_radius: float) -> np.ndarray:
    """Max height per polar bin; points at or beyond max_radius are dropped."""
    mat = np.zeros((n_sectors, n_rings), dtype=np.float32)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        return mat
    rho = np.hypot(points[:, 0], points[:, 1])
    keep = rho < max_radius
    if not np.any(keep):
        return mat
    p = points[keep]
    rho = rho[keep]
    ring = np.minimum((rho / max_radius * n_rings).astype(int), n_rings - 1)
    ang = np.arctan2(p[:, 1], p[:, 0])
    sector = np.minimum(((ang + np.pi) / (2 * np.pi) * n_sectors).astype(int),
                        n_sectors - 1)
    z = np.maximum(p[:, 2], 0.0)
    np.maximum.at(mat, (sector, ring), z.astype(np.float32))
    return mat


def make_descriptor(points: np.ndarray, cfg: DescriptorConfig, owner: int = 0,
                    room_index: int = 0, extents=(0.0, 0.0),
                    frame_yaw: float = 0.0) -> RoomDescriptor:
    """Descriptor of a room cloud: voxel-downsample then bin max heights."""
    from .geometry import voxel_downsample_points

    pts = voxel_downsample_points(points, cfg.voxel)
    mat = scan_context_matrix(pts, cfg.n_sectors, cfg.n_rings, cfg.max_radius)
    return RoomDescriptor(owner, room_index, mat, np.asarray(extents, float),
                          frame_yaw, cfg.n_sectors, cfg.n_rings, cfg.max_radius)


def sc_matrix_distance(A: np.ndarray, B: np.ndarray) -> tuple[float, int]:
    """Shift-minimized mean column cosine dissimilarity of two descriptor
    matrices (sectors x rings).  Column pairs that are both all-zero are
    excluded; a zero column against a nonzero one counts as similarity 0.

    Returns (distance, shift) where rotating the *source* cloud of B by
    shift * 2*pi/n_sectors about z best aligns it with A's cloud.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ConfigMismatchError(f"descriptor shapes differ: {A.shape} vs {B.shape}")
    n_s = A.shape[0]
    a_norm = np.linalg.norm(A, axis=1)
    b_norm = np.linalg.norm(B, axis=1)
    M = A @ B.T  # M[j, k] = <col_j(a), col_k(b)>
    j = np.arange(n_s)
    cols = (j[None, :] + j[:, None]) % n_s          # cols[s, j] = j + s
    dots = M[j[None, :], cols]
    bn = b_norm[cols]
    den = a_norm[None, :] * bn
    with np.errstate(invalid="ignore", divide="ignore"):
        cs = np.where(den > 0.0, dots / np.where(den > 0, den, 1.0), 0.0)
    mask = (a_norm[None, :] > 0.0) | (bn > 0.0)
    counts = mask.sum(axis=1)
    sums = (cs * mask).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.where(counts > 0, 1.0 - sums / np.maximum(counts, 1), 0.0)
    s_star = int(np.argmin(dist))
    return max(float(dist[s_star]), 0.0), (-s_star) % n_s


def sc_distance(a: RoomDescriptor, b: RoomDescriptor) -> tuple[float, int]:
    if (a.n_sectors, a.n_rings) != (b.n_sectors, b.n_rings) or \
            abs(a.max_radius - b.max_radius) > 1e-9:
        raise ConfigMismatchError("descriptor configurations differ")
    return sc_matrix_distance(a.matrix, b.matrix)


def shift_to_yaw(shift: int, n_sectors: int) -> float:
    """Yaw seed (wrapped) for mapping the matched cloud into the query frame."""
    yaw = shift * 2.0 * np.pi / n_sectors
    return float(-((-yaw + np.pi) % (2.0 * np.pi) - np.pi))


def match_rooms(local_descriptors, peer_store, sc_threshold: float,
                exclude=()) -> list[MatchCandidate]:
    """All (local, peer) descriptor pairs within the distance threshold,
    ascending by distance.  peer_store maps (agent, room_index) to the latest
    descriptor; pairs listed in exclude are skipped."""
    exclude = set(exclude)
    out = []
    for local in local_descriptors:
        for (agent, room_index), peer_desc in peer_store.items():
            key = (local.room_index, agent, room_index)
            if key in exclude:
                continue
            dist, shift = sc_distance(local, peer_desc)
            if dist <= sc_threshold:
                out.append(MatchCandidate(local.room_index, agent, room_index,
                                          dist, shift,
                                          shift_to_yaw(shift, local.n_sectors)))
    out.sort(key=lambda c: (c.distance, c.peer, c.peer_room, c.local_room))
    return out


# ---------------------------------------------------------------------------
# fine alignment (planar voxelized point-to-distribution registration)
# ---------------------------------------------------------------------------


@dataclass
class AlignConfig:
    voxel: float = 0.5
    max_iterations: int = 50
    tolerance: float = 1e-6
    correspondence_radius: float = 1.0
    accept_threshold: float = 0.07  # mean nearest-point residual, meters
    source_cap: int = 4000
    cov_floor: float = 1e-3
    polish_iterations: int = 15
    polish_radius: float = 0.4


def _voxel_statistics(points: np.ndarray, voxel: float, cov_floor: float):
    idx = np.floor(points / voxel).astype(np.int64)
    uniq, inv, counts = np.unique(idx, axis=0, return_inverse=True,
                                  return_counts=True)
    means = np.zeros((len(uniq), 3))
    np.add.at(means, inv, points)
    means /= counts[:, None]
    centered = points - means[inv]
    covs = np.zeros((len(uniq), 3, 3))
    np.add.at(covs, inv, centered[:, :, None] * centered[:, None, :])
    covs /= counts[:, None, None]
    covs += (cov_floor ** 2) * np.eye(3)
    return means, covs


def fine_align(points_a: np.ndarray, points_b: np.ndarray, yaw_seed: float,
               cfg: AlignConfig | None = None) -> tuple[Pose, float]:
    """Planar (x, y, yaw) registration of cloud b onto cloud a.

    Minimizes point-to-voxel-distribution error against a Gaussian voxel model
    of a, seeded with the descriptor yaw; returns the transform mapping b
    coordinates into a's frame plus the mean nearest-point fitness.  Raises
    AlignmentRejectedError when the fitness exceeds the acceptance threshold.
    """
    cfg = cfg or AlignConfig()
    points_a = np.asarray(points_a, dtype=float).reshape(-1, 3)
    points_b = np.asarray(points_b, dtype=float).reshape(-1, 3)
    if points_a.shape[0] == 0 or points_b.shape[0] == 0:
        raise EmptyRoomCloudError("cannot align empty clouds")

    means, covs = _voxel_statistics(points_a, cfg.voxel, cfg.cov_floor)
    weights = np.linalg.inv(covs)
    tree = cKDTree(means)

    src = points_b
    if src.shape[0] > cfg.source_cap:
        stride = int(np.ceil(src.shape[0] / cfg.source_cap))
        src = src[::stride]

    def gn_step(params, targets, wts, radius, ktree):
        x, y, psi = params
        c, s = np.cos(psi), np.sin(psi)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        moved = src @ R.T + np.array([x, y, 0.0])
        dist, nn = ktree.query(moved, distance_upper_bound=radius)
        ok = np.isfinite(dist)
        if not np.any(ok):
            raise AlignmentRejectedError(np.inf)
        mv = moved[ok]
        r = targets[nn[ok]] - mv
        J = np.zeros((mv.shape[0], 3, 3))
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        J[:, 0, 2] = -mv[:, 1] + y
        J[:, 1, 2] = mv[:, 0] - x
        if wts is None:
            H = np.einsum("nji,njk->ik", J, J)
            g = np.einsum("nji,nj->i", J, r)
        else:
            W = wts[nn[ok]]
            JtW = np.einsum("nji,njk->nik", J, W)
            H = np.einsum("nik,nkl->il", JtW, J)
            g = np.einsum("nik,nk->i", JtW, r)
        try:
            return np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise AlignmentRejectedError(np.inf)

    # coarse: point-to-voxel-distribution from the descriptor yaw seed
    params = np.array([0.0, 0.0, float(yaw_seed)])
    for _ in range(cfg.max_iterations):
        delta = gn_step(params, means, weights, cfg.correspondence_radius, tree)
        params += delta
        if np.linalg.norm(delta) < cfg.tolerance:
            break
    # polish: nearest-point refinement on the raw target cloud
    full_tree = cKDTree(points_a)
    for _ in range(cfg.polish_iterations):
        delta = gn_step(params, points_a, None, cfg.polish_radius, full_tree)
        params += delta
        if np.linalg.norm(delta) < cfg.tolerance:
            break

    pose = Pose.from_xyz_yaw(params[0], params[1], 0.0, params[2])
    moved_full = pose.apply(points_b)
    fitness = float(np.mean(full_tree.query(moved_full, workers=-1)[0]))
    if fitness > cfg.accept_threshold:
        raise AlignmentRejectedError(fitness, pose)
    return pose, fitness
