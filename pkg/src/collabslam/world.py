"""Synthetic structured worlds and simulated sensing.

Worlds are axis-aligned room grids with door gaps, per-room clutter and a
floor plane.  Sensing is ray-cast range returns plus direct (noisy) wall-plane
observations; odometry is the ground-truth relative pose corrupted by noise
that accumulates with distance traveled and yaw turned.  Everything is a pure
function of (spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .descriptor import DescriptorConfig, make_descriptor, sc_distance
from .geometry import Plane, PointCloud, Pose, make_plane, quat_rotate

_EPS = 1e-9


class InvalidSpecError(ValueError):
    """The world specification is inconsistent (e.g. overlapping rooms)."""


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass
class DoorSpec:
    side: str        # one of -x, +x, -y, +y
    at: float        # gap center along the wall (world coordinate)
    width: float = 1.1


@dataclass
class RoomSpec:
    x: tuple[float, float]
    y: tuple[float, float]
    doors: list[DoorSpec] = field(default_factory=list)

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x[0] + self.x[1]) / 2, (self.y[0] + self.y[1]) / 2])

    @property
    def extents(self) -> np.ndarray:
        return np.array([self.x[1] - self.x[0], self.y[1] - self.y[0]])


@dataclass
class ClutterSpec:
    per_room: int = 3
    size: tuple[float, float] = (0.8, 1.4)
    height: tuple[float, float] = (1.2, 2.8)
    wall_clearance: float = 0.3
    path_clearance: float = 0.45
    min_descriptor_gap: float = 0.42  # required pairwise room-descriptor distance
    max_attempts: int = 40


@dataclass
class WorldSpec:
    rooms: list[RoomSpec]
    corridors: list[RoomSpec] = field(default_factory=list)
    wall_height: float = 3.0
    clutter: ClutterSpec = field(default_factory=ClutterSpec)
    keepout_paths: list[np.ndarray] = field(default_factory=list)
    name: str = "world"


@dataclass
class SensorModel:
    horizontal_rays: int = 360
    rings: int = 16
    vertical_fov_deg: float = 30.0
    max_range: float = 30.0
    range_sigma: float = 0.01
    plane_normal_sigma: float = 0.005
    plane_offset_sigma: float = 0.005
    odom_trans_sigma: float = 0.01   # meters per sqrt(meter traveled)
    odom_yaw_sigma: float = 0.002    # radians per sqrt(radian turned)
    mount_height: float = 0.6

    def scaled(self, noise: float) -> "SensorModel":
        """Copy with all noise magnitudes multiplied by `noise`."""
        return SensorModel(
            self.horizontal_rays, self.rings, self.vertical_fov_deg,
            self.max_range, self.range_sigma * noise,
            self.plane_normal_sigma * noise, self.plane_offset_sigma * noise,
            self.odom_trans_sigma * noise, self.odom_yaw_sigma * noise,
            self.mount_height,
        )


@dataclass
class TrajectorySpec:
    waypoints: np.ndarray  # (M, 2) world coordinates
    speed: float = 1.0
    keyframe_spacing: float = 0.5

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)


# ---------------------------------------------------------------------------
# world geometry
# ---------------------------------------------------------------------------


@dataclass
class WallSurface:
    """One physical wall plane: axis-aligned, vertical, with solid sub-spans."""

    axis: int                 # 0: plane x = coord, 1: plane y = coord
    coord: float
    segments: list[tuple[float, float]]  # solid spans along the other axis
    height: float
    plane: Plane = field(init=False)

    def __post_init__(self):
        n = np.zeros(3)
        n[self.axis] = 1.0
        self.plane = make_plane(n, -self.coord)

    def closest_point(self, p: np.ndarray) -> np.ndarray:
        """Closest point on any solid segment to a 3D query point."""
        other = 1 - self.axis
        best, best_d = None, np.inf
        for lo, hi in self.segments:
            q = np.empty(3)
            q[self.axis] = self.coord
            q[other] = np.clip(p[other], lo, hi)
            q[2] = np.clip(p[2], 0.0, self.height)
            d = np.linalg.norm(q - p)
            if d < best_d:
                best, best_d = q, d
        return best


@dataclass
class ClutterBox:
    center: np.ndarray  # (2,) footprint center
    size: np.ndarray    # (sx, sy)
    height: float

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([self.center[0] - self.size[0] / 2,
                       self.center[1] - self.size[1] / 2, 0.0])
        hi = np.array([self.center[0] + self.size[0] / 2,
                       self.center[1] + self.size[1] / 2, self.height])
        return lo, hi


@dataclass
class World:
    spec: WorldSpec
    walls: list[WallSurface]
    clutter: list[ClutterBox]
    bounds: np.ndarray            # ((xmin, ymin), (xmax, ymax))
    room_centers: np.ndarray      # (R, 2) ground truth (corridors excluded)
    room_extents: np.ndarray      # (R, 2)
    floor_center: np.ndarray      # (3,)
    gt_cloud: np.ndarray          # dense reference surface sampling

    @property
    def wall_planes(self) -> list[Plane]:
        return [w.plane for w in self.walls]


def _merge_wall_segments(areas: list[RoomSpec], height: float) -> list[WallSurface]:
    """Collect per-room sides into unique physical wall planes with door gaps."""
    sides = {}  # (axis, coord) -> list of (lo, hi, gaps)
    for room in areas:
        for side in ("-x", "+x", "-y", "+y"):
            axis = 0 if side[1] == "x" else 1
            coord = (room.x if axis == 0 else room.y)[0 if side[0] == "-" else 1]
            lo, hi = (room.y if axis == 0 else room.x)
            gaps = [(d.at - d.width / 2, d.at + d.width / 2)
                    for d in room.doors if d.side == side]
            sides.setdefault((axis, round(coord, 6)), []).append((lo, hi, gaps))
    walls = []
    for (axis, coord), entries in sorted(sides.items()):
        events = []
        gap_union = []
        for lo, hi, gaps in entries:
            events.append((lo, hi))
            gap_union.extend(gaps)
        # union of spans
        events.sort()
        spans = []
        cur_lo, cur_hi = events[0]
        for lo, hi in events[1:]:
            if lo <= cur_hi + 1e-9:
                cur_hi = max(cur_hi, hi)
            else:
                spans.append((cur_lo, cur_hi))
                cur_lo, cur_hi = lo, hi
        spans.append((cur_lo, cur_hi))
        # subtract door gaps
        segments = []
        for lo, hi in spans:
            cuts = sorted(g for g in gap_union if g[0] < hi and g[1] > lo)
            pos = lo
            for g0, g1 in cuts:
                if g0 > pos + 1e-9:
                    segments.append((pos, min(g0, hi)))
                pos = max(pos, g1)
            if pos < hi - 1e-9:
                segments.append((pos, hi))
        if segments:
            walls.append(WallSurface(axis, coord, segments, height))
    return walls


def _point_segment_distance(px, py, ax, ay, bx, by) -> float:
    abx, aby = bx - ax, by - ay
    denom = abx * abx + aby * aby
    if denom < 1e-12:
        t = 0.0
    else:
        t = ((px - ax) * abx + (py - ay) * aby) / denom
        t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
    dx, dy = ax + t * abx - px, ay + t * aby - py
    return (dx * dx + dy * dy) ** 0.5


def _segment_rect_distance(ax, ay, bx, by, lo, hi) -> float:
    """2D distance between segment ab and an axis-aligned rectangle."""
    if (lo[0] <= ax <= hi[0] and lo[1] <= ay <= hi[1]
            and lo[0] <= bx <= hi[0] and lo[1] <= by <= hi[1]):
        return 0.0
    corners = ((lo[0], lo[1]), (hi[0], lo[1]), (hi[0], hi[1]), (lo[0], hi[1]))
    best = np.inf
    for i in range(4):
        cx, cy = corners[i]
        dx, dy = corners[(i + 1) % 4]
        if _segments_intersect(ax, ay, bx, by, cx, cy, dx, dy):
            return 0.0
        best = min(best,
                   _point_segment_distance(ax, ay, cx, cy, dx, dy),
                   _point_segment_distance(bx, by, cx, cy, dx, dy),
                   _point_segment_distance(cx, cy, ax, ay, bx, by),
                   _point_segment_distance(dx, dy, ax, ay, bx, by))
    return best


def _segments_intersect(ax, ay, bx, by, cx, cy, dx, dy) -> bool:
    def orient(px, py, qx, qy, rx, ry):
        return (qx - px) * (ry - py) - (qy - py) * (rx - px)

    o1 = orient(ax, ay, bx, by, cx, cy)
    o2 = orient(ax, ay, bx, by, dx, dy)
    o3 = orient(cx, cy, dx, dy, ax, ay)
    o4 = orient(cx, cy, dx, dy, bx, by)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def _path_rect_distance(lo, hi, segments) -> float:
    best = np.inf
    for ax, ay, bx, by in segments:
        best = min(best, _segment_rect_distance(ax, ay, bx, by, lo, hi))
    return best


def _grid(lo: float, hi: float, pitch: float) -> np.ndarray:
    n = max(2, int(round((hi - lo) / pitch)) + 1)
    return np.linspace(lo, hi, n)


def _sample_wall_points(wall: WallSurface, pitch: float) -> np.ndarray:
    other = 1 - wall.axis
    pts = []
    zg = _grid(0.0, wall.height, pitch)
    for lo, hi in wall.segments:
        sg = _grid(lo, hi, pitch)
        g = np.stack(np.meshgrid(sg, zg, indexing="ij"), -1).reshape(-1, 2)
        out = np.empty((len(g), 3))
        out[:, wall.axis] = wall.coord
        out[:, other] = g[:, 0]
        out[:, 2] = g[:, 1]
        pts.append(out)
    return np.concatenate(pts, axis=0) if pts else np.zeros((0, 3))


def _sample_box_points(box: ClutterBox, pitch: float) -> np.ndarray:
    lo, hi = box.bounds
    pts = []
    zg = _grid(0.0, box.height, pitch)
    xg = _grid(lo[0], hi[0], pitch)
    yg = _grid(lo[1], hi[1], pitch)
    for x in (lo[0], hi[0]):
        g = np.stack(np.meshgrid(yg, zg, indexing="ij"), -1).reshape(-1, 2)
        pts.append(np.column_stack([np.full(len(g), x), g[:, 0], g[:, 1]]))
    for y in (lo[1], hi[1]):
        g = np.stack(np.meshgrid(xg, zg, indexing="ij"), -1).reshape(-1, 2)
        pts.append(np.column_stack([g[:, 0], np.full(len(g), y), g[:, 1]]))
    g = np.stack(np.meshgrid(xg, yg, indexing="ij"), -1).reshape(-1, 2)
    pts.append(np.column_stack([g[:, 0], g[:, 1], np.full(len(g), box.height)]))
    return np.concatenate(pts, axis=0)


def _sample_floor_points(bounds: np.ndarray, pitch: float) -> np.ndarray:
    xg = _grid(bounds[0, 0], bounds[1, 0], pitch)
    yg = _grid(bounds[0, 1], bounds[1, 1], pitch)
    g = np.stack(np.meshgrid(xg, yg, indexing="ij"), -1).reshape(-1, 2)
    return np.column_stack([g[:, 0], g[:, 1], np.zeros(len(g))])


def _room_validation_cloud(world_walls, clutter, room: RoomSpec, pitch, rng):
    """Room-local surface sample used for the descriptor uniqueness check."""
    c = room.center
    pts = []
    for wall in world_walls:
        p = _sample_wall_points(wall, pitch)
        if len(p) == 0:
            continue
        keep = (
            (p[:, 0] >= room.x[0] - 0.05) & (p[:, 0] <= room.x[1] + 0.05)
            & (p[:, 1] >= room.y[0] - 0.05) & (p[:, 1] <= room.y[1] + 0.05)
        )
        pts.append(p[keep])
    for box in clutter:
        if room.x[0] < box.center[0] < room.x[1] and room.y[0] < box.center[1] < room.y[1]:
            pts.append(_sample_box_points(box, pitch))
    xg = _grid(room.x[0], room.x[1], pitch)
    yg = _grid(room.y[0], room.y[1], pitch)
    g = np.stack(np.meshgrid(xg, yg, indexing="ij"), -1).reshape(-1, 2)
    pts.append(np.column_stack([g[:, 0], g[:, 1], np.zeros(len(g))]))
    cloud = np.concatenate(pts, axis=0)
    cloud = cloud + rng.normal(0.0, 0.008, cloud.shape)
    return cloud - np.array([c[0], c[1], 0.0])


def _place_clutter(spec: WorldSpec, rng: np.random.Generator) -> list[ClutterBox]:
    cs = spec.clutter
    boxes: list[ClutterBox] = []
    for room in spec.rooms:
        # only path segments near this room matter for clearance
        local_paths = []
        rx, ry = room.x, room.y
        for path in spec.keepout_paths:
            for a, b in zip(path[:-1], path[1:]):
                if (max(a[0], b[0]) < rx[0] - 1.0 or min(a[0], b[0]) > rx[1] + 1.0
                        or max(a[1], b[1]) < ry[0] - 1.0 or min(a[1], b[1]) > ry[1] + 1.0):
                    continue
                local_paths.append((float(a[0]), float(a[1]), float(b[0]), float(b[1])))
        placed: list[ClutterBox] = []
        attempts = 0
        while len(placed) < cs.per_room and attempts < 300:
            attempts += 1
            size = rng.uniform(cs.size[0], cs.size[1], 2)
            h = rng.uniform(cs.height[0], cs.height[1])
            lo_x = room.x[0] + cs.wall_clearance + size[0] / 2
            hi_x = room.x[1] - cs.wall_clearance - size[0] / 2
            lo_y = room.y[0] + cs.wall_clearance + size[1] / 2
            hi_y = room.y[1] - cs.wall_clearance - size[1] / 2
            if lo_x >= hi_x or lo_y >= hi_y:
                continue
            c = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
            rect_lo = (c[0] - size[0] / 2, c[1] - size[1] / 2)
            rect_hi = (c[0] + size[0] / 2, c[1] + size[1] / 2)
            if _path_rect_distance(rect_lo, rect_hi, local_paths) < cs.path_clearance:
                continue
            clash = False
            for other in placed:
                gap = np.abs(c - other.center) - (size + other.size) / 2
                if np.max(gap) < 0.15:
                    clash = True
                    break
            if clash:
                continue
            placed.append(ClutterBox(c, size, h))
        boxes.extend(placed)
    return boxes


def generate_world(spec: WorldSpec, seed: int,
                   descriptor_cfg: DescriptorConfig | None = None) -> World:
    """Deterministic world: walls, clutter, floor, ground truth references.

    Clutter is re-drawn until every pair of rooms has descriptor distance
    above the configured gap, so room appearance stays unique.
    """
    for i, a in enumerate(spec.rooms):
        for b in spec.rooms[i + 1:]:
            if (a.x[0] < b.x[1] - 1e-9 and b.x[0] < a.x[1] - 1e-9
                    and a.y[0] < b.y[1] - 1e-9 and b.y[0] < a.y[1] - 1e-9):
                raise InvalidSpecError("rooms overlap")

    walls = _merge_wall_segments(list(spec.rooms) + list(spec.corridors),
                                 spec.wall_height)
    all_x = [r.x for r in spec.rooms] + [c.x for c in spec.corridors]
    all_y = [r.y for r in spec.rooms] + [c.y for c in spec.corridors]
    bounds = np.array([
        [min(x[0] for x in all_x), min(y[0] for y in all_y)],
        [max(x[1] for x in all_x), max(y[1] for y in all_y)],
    ])

    desc_cfg = descriptor_cfg or DescriptorConfig()
    clutter = None
    if spec.rooms and spec.clutter.per_room > 0:
        for attempt in range(spec.clutter.max_attempts):
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, 0x10AD, attempt)))
            candidate = _place_clutter(spec, rng)
            if len(spec.rooms) < 2:
                clutter = candidate
                break
            descs = []
            vrng = np.random.default_rng(np.random.SeedSequence((seed, 0xD15C, attempt)))
            for room in spec.rooms:
                cloud = _room_validation_cloud(walls, candidate, room, 0.07, vrng)
                descs.append(make_descriptor(cloud, desc_cfg))
            ok = True
            for i in range(len(descs)):
                for j in range(i + 1, len(descs)):
                    d, _ = sc_distance(descs[i], descs[j])
                    if d <= spec.clutter.min_descriptor_gap:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                clutter = candidate
                break
        if clutter is None:
            raise InvalidSpecError(
                "could not place clutter with unique room descriptors; "
                "adjust clutter spec or room shapes"
            )
    else:
        clutter = []

    gt_parts = [_sample_wall_points(w, 0.05) for w in walls]
    gt_parts += [_sample_box_points(b, 0.05) for b in clutter]
    gt_parts.append(_sample_floor_points(bounds, 0.05))
    gt_cloud = np.concatenate([p for p in gt_parts if len(p)], axis=0)

    centers = np.array([r.center for r in spec.rooms]).reshape(-1, 2)
    extents = np.array([r.extents for r in spec.rooms]).reshape(-1, 2)
    floor_center = np.array([*centers.mean(axis=0), 0.0]) if len(centers) else np.zeros(3)

    return World(spec, walls, clutter, bounds, centers, extents, floor_center,
                 gt_cloud)


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def _ray_distances(world: World, origin: np.ndarray, dirs: np.ndarray,
                   max_range: float) -> np.ndarray:
    """Nearest-surface distance per ray (inf when nothing is hit)."""
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    o = origin

    for wall in world.walls:
        a = wall.axis
        da = dirs[:, a]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(da) > 1e-12, (wall.coord - o[a]) / da, np.inf)
        valid = (t > 1e-6) & (t < np.minimum(best, max_range))
        if not np.any(valid):
            continue
        tv = np.where(valid, t, 0.0)
        pts_other = o[1 - a] + tv * dirs[:, 1 - a]
        pts_z = o[2] + tv * dirs[:, 2]
        in_z = (pts_z >= 0.0) & (pts_z <= wall.height)
        in_span = np.zeros(n, dtype=bool)
        for lo, hi in wall.segments:
            in_span |= (pts_other >= lo) & (pts_other <= hi)
        hit = valid & in_z & in_span
        best[hit] = t[hit]

    for box in world.clutter:
        lo, hi = box.bounds
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        tnear = np.nanmax(np.minimum(t0, t1), axis=1)
        tfar = np.nanmin(np.maximum(t0, t1), axis=1)
        hit = (tnear <= tfar) & (tnear > 1e-6) & (tnear < np.minimum(best, max_range))
        best[hit] = tnear[hit]

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dz < -1e-12, -o[2] / dz, np.inf)
    valid = (t > 1e-6) & (t < np.minimum(best, max_range))
    if np.any(valid):
        tv = np.where(valid, t, 0.0)
        px = o[0] + tv * dirs[:, 0]
        py = o[1] + tv * dirs[:, 1]
        inside = (
            (px >= world.bounds[0, 0]) & (px <= world.bounds[1, 0])
            & (py >= world.bounds[0, 1]) & (py <= world.bounds[1, 1])
        )
        hit = valid & inside
        best[hit] = t[hit]

    return best


def sensor_ray_directions(sensor: SensorModel) -> np.ndarray:
    """Body-frame unit ray directions, horizontal-major order."""
    az = np.linspace(-np.pi, np.pi, sensor.horizontal_rays, endpoint=False)
    half = np.deg2rad(sensor.vertical_fov_deg) / 2.0
    el = np.linspace(-half, half, sensor.rings)
    azg, elg = np.meshgrid(az, el, indexing="ij")
    ce = np.cos(elg)
    dirs = np.stack([ce * np.cos(azg), ce * np.sin(azg), np.sin(elg)], axis=-1)
    return dirs.reshape(-1, 3)


def raycast_scan(world: World, pose: Pose, sensor: SensorModel,
                 rng: np.random.Generator) -> PointCloud:
    """Body-frame returns for every ray that hits a surface within range."""
    dirs_body = sensor_ray_directions(sensor)
    dirs_world = quat_rotate(pose.q, dirs_body)
    dist = _ray_distances(world, pose.t, dirs_world, sensor.max_range)
    hit = np.isfinite(dist)
    ranges = dist[hit]
    if sensor.range_sigma > 0:
        ranges = ranges + rng.normal(0.0, sensor.range_sigma, ranges.shape)
    return PointCloud(dirs_body[hit] * ranges[:, None], frame_id="body")


MIN_VISIBLE_SAMPLES = 3
MIN_VISIBLE_SPAN = 0.6  # meters of unoccluded wall needed for a plane fit


def observe_planes(world: World, pose: Pose, sensor: SensorModel,
                   rng: np.random.Generator) -> list[tuple[Plane, np.ndarray]]:
    """Noisy body-frame plane observation per visible wall.

    A wall counts as visible when its closest surface point is within range
    and unoccluded, and enough of its surface is in direct view to support a
    plane fit (a sliver glimpsed through a door gap is not observable the way
    a segmented plane would be).
    """
    from .geometry import tangent_basis, transform_plane

    inv = pose.inverse()
    sig_n = sensor.plane_normal_sigma
    sig_d = sensor.plane_offset_sigma
    cov = np.diag([max(sig_n, 1e-4) ** 2, max(sig_n, 1e-4) ** 2,
                   max(sig_d, 1e-4) ** 2])

    # visibility probes for every wall, cast in one batch
    probes = []  # (wall_idx, span_coord, target point)
    z_probe = min(max(sensor.mount_height, 0.1), world.spec.wall_height - 0.1)
    for wi, wall in enumerate(world.walls):
        other = 1 - wall.axis
        for lo, hi in wall.segments:
            n_samples = max(2, min(24, int((hi - lo) / 0.3) + 1))
            for s in np.linspace(lo + 0.03, hi - 0.03, n_samples):
                q = np.empty(3)
                q[wall.axis] = wall.coord
                q[other] = s
                q[2] = z_probe
                probes.append((wi, s, q))
    targets = np.array([p[2] for p in probes])
    delta = targets - pose.t
    dists = np.linalg.norm(delta, axis=1)
    ok = dists > 1e-6
    dirs = np.zeros_like(delta)
    dirs[ok] = delta[ok] / dists[ok, None]
    hit = _ray_distances(world, pose.t, dirs, sensor.max_range)
    visible = ok & (dists <= sensor.max_range) & (hit >= dists - 1e-3)

    spans: dict[int, list[float]] = {}
    for (wi, s, _), v in zip(probes, visible):
        if v:
            spans.setdefault(wi, []).append(s)

    out = []
    for wi, wall in enumerate(world.walls):
        seen = spans.get(wi, [])
        if len(seen) < MIN_VISIBLE_SAMPLES or max(seen) - min(seen) < MIN_VISIBLE_SPAN:
            continue
        body = transform_plane(inv, wall.plane)
        n, off = body.normal, body.offset
        if sig_n > 0 or sig_d > 0:
            b = tangent_basis(n)
            n = n + b @ rng.normal(0.0, sig_n, 2)
            n = n / np.linalg.norm(n)
            off = off + rng.normal(0.0, sig_d)
        out.append((Plane(n, off, cov).canonical(), cov))
    return out


# ---------------------------------------------------------------------------
# trajectories and odometry
# ---------------------------------------------------------------------------


def generate_trajectory(tspec: TrajectorySpec, sensor: SensorModel) -> list[Pose]:
    """Ground-truth keyframe poses along the waypoint polyline: one pose per
    keyframe spacing, heading along the current segment, z at mount height."""
    wp = tspec.waypoints
    if wp.shape[0] < 2:
        raise InvalidSpecError("trajectory needs at least two waypoints")
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if np.any(seg_len < 1e-9):
        raise InvalidSpecError("degenerate trajectory segment")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    stations = np.arange(0.0, total + 1e-9, tspec.keyframe_spacing)
    poses = []
    for s in stations:
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        frac = (s - cum[k]) / seg_len[k]
        p = wp[k] + frac * seg[k]
        yaw = float(np.arctan2(seg[k, 1], seg[k, 0]))
        poses.append(Pose.from_xyz_yaw(p[0], p[1], sensor.mount_height, yaw))
    return poses


def step_odometry(gt_prev: Pose, gt_next: Pose, sensor: SensorModel,
                  rng: np.random.Generator) -> Pose:
    """Noisy relative pose: exact relative motion plus noise that grows with
    the square root of distance traveled / yaw turned."""
    from .geometry import quat_from_rotvec, quat_mul, quat_to_rotvec, wrap_angle

    rel = gt_prev.inverse().compose(gt_next)
    dist = float(np.linalg.norm(rel.t))
    turn = float(np.linalg.norm(quat_to_rotvec(rel.q)))
    sig_t = sensor.odom_trans_sigma * np.sqrt(dist)
    sig_r = sensor.odom_yaw_sigma * np.sqrt(turn)
    noise_t = rng.normal(0.0, 1.0, 3) * np.array([sig_t, sig_t, 0.1 * sig_t])
    eps_yaw = rng.normal(0.0, 1.0) * sig_r
    q = quat_mul(rel.q, quat_from_rotvec(np.array([0.0, 0.0, eps_yaw])))
    return Pose(q, rel.t + noise_t)


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    world_spec: WorldSpec
    trajectories: list[TrajectorySpec]
    sensor: SensorModel
    pipeline: dict

    @property
    def n_robots(self) -> int:
        return len(self.trajectories)


def builtin_scenario_path(name: str) -> Path:
    return Path(__file__).parent / "scenarios" / f"{name.replace('_', '-')}.yaml"


def load_scenario(path: str | Path) -> Scenario:
    """Parse a declarative scenario file (see scenarios/sim-a.yaml for the
    schema): world layout, robot waypoint routes, sensor model and pipeline
    parameters."""
    p = Path(path)
    if not p.exists():
        builtin = builtin_scenario_path(str(path))
        if builtin.exists():
            p = builtin
        else:
            raise FileNotFoundError(f"scenario file not found: {path}")
    raw = yaml.safe_load(p.read_text())

    wd = raw.get("world", {})
    rooms = []
    for r in wd.get("rooms", []):
        doors = [DoorSpec(d["side"], float(d["at"]), float(d.get("width", 1.1)))
                 for d in r.get("doors", [])]
        rooms.append(RoomSpec(tuple(r["x"]), tuple(r["y"]), doors))
    corridors = []
    for r in wd.get("corridors", []):
        doors = [DoorSpec(d["side"], float(d["at"]), float(d.get("width", 1.1)))
                 for d in r.get("doors", [])]
        corridors.append(RoomSpec(tuple(r["x"]), tuple(r["y"]), doors))
    cl = wd.get("clutter", {})
    clutter = ClutterSpec(
        per_room=int(cl.get("per_room", 3)),
        size=tuple(cl.get("size", (0.8, 1.4))),
        height=tuple(cl.get("height", (1.2, 2.8))),
        wall_clearance=float(cl.get("wall_clearance", 0.3)),
        path_clearance=float(cl.get("path_clearance", 0.45)),
        min_descriptor_gap=float(cl.get("min_descriptor_gap", 0.42)),
        max_attempts=int(cl.get("max_attempts", 40)),
    )

    trajectories = [
        TrajectorySpec(np.asarray(r["waypoints"], dtype=float),
                       float(r.get("speed", 1.0)),
                       float(r.get("keyframe_spacing", 0.5)))
        for r in raw.get("robots", [])
    ]
    spec = WorldSpec(
        rooms=rooms, corridors=corridors,
        wall_height=float(wd.get("wall_height", 3.0)),
        clutter=clutter,
        keepout_paths=[t.waypoints for t in trajectories],
        name=raw.get("name", p.stem),
    )

    sd = raw.get("sensor", {})
    sensor = SensorModel(
        horizontal_rays=int(sd.get("horizontal_rays", 360)),
        rings=int(sd.get("rings", 16)),
        vertical_fov_deg=float(sd.get("vertical_fov_deg", 30.0)),
        max_range=float(sd.get("max_range", 30.0)),
        range_sigma=float(sd.get("range_sigma", 0.01)),
        plane_normal_sigma=float(sd.get("plane_normal_sigma", 0.005)),
        plane_offset_sigma=float(sd.get("plane_offset_sigma", 0.005)),
        odom_trans_sigma=float(sd.get("odom_trans_sigma", 0.01)),
        odom_yaw_sigma=float(sd.get("odom_yaw_sigma", 0.002)),
        mount_height=float(sd.get("mount_height", 0.6)),
    )

    return Scenario(raw.get("name", p.stem), spec, trajectories, sensor,
                    raw.get("pipeline", {}))
