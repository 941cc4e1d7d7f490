"""Per-robot front-end: odometry + plane sensing into a layered local graph.

Keyframes enter as SE(3) nodes chained by odometry factors; observed planes
are associated to wall nodes (or spawn new ones) and constrained with
pose-plane factors.  Facing wall pairs around the robot become room nodes with
a room-wall factor, and a fixed floor node tracks the mean of the room
centers.  The first keyframe is the gauge: it pins the agent map frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptor import RoomFrame
from .factor_graph import FactorGraph, NodeId, OptimizeConfig, OptimizeResult
from .geometry import (
    Plane,
    PointCloud,
    Pose,
    plane_gap,
    room_center_from_walls,
    transform_plane,
)


@dataclass
class FrontEndConfig:
    assoc_angle_deg: float = 10.0
    assoc_offset: float = 0.35
    pair_angle_deg: float = 15.0     # anti-parallel tolerance for wall pairs
    perp_angle_deg: float = 30.0     # pair-axis perpendicularity tolerance
    room_gap: tuple[float, float] = (1.5, 15.0)
    min_wall_distance: float = 0.3
    member_slack: float = 0.2
    room_sigma: float = 0.05
    odom_sigma_floor: tuple[float, float] = (1e-3, 1e-4)  # trans m, rot rad
    plane_sigma_floor: float = 1e-4
    mount_height: float = 0.6
    extent_band: float = 0.08       # scan-to-plane distance counted as support
    extent_reach: float = 2.5       # max gap between wall extent and foot point
    insert_iterations: int = 4


@dataclass
class Keyframe:
    node: NodeId
    scan: PointCloud                 # body-frame points
    odom_pose: Pose                  # dead-reckoned pose at creation


@dataclass
class RoomRecord:
    node: NodeId
    walls: tuple[NodeId, NodeId, NodeId, NodeId]  # x pair then y pair
    signs: np.ndarray                # inward orientation of each wall state
    frame: RoomFrame                 # committed at detection time
    extents: np.ndarray              # (width, depth) along the pair axes
    members: list[NodeId] = field(default_factory=list)

    @property
    def index(self) -> int:
        return self.node.index


class LocalGraph:
    def __init__(self, agent_id: int, config: FrontEndConfig | None = None):
        self.agent = agent_id
        self.cfg = config or FrontEndConfig()
        self.graph = FactorGraph()
        self.keyframes: list[Keyframe] = []
        self.wall_nodes: list[NodeId] = []
        self.wall_extents: dict[NodeId, np.ndarray] = {}  # observed 2D bbox
        self.rooms: list[RoomRecord] = []
        self.floor_node: NodeId | None = None
        self._room_wall_sets: set[frozenset] = set()
        self._n_rooms = 0

    # -- ids ----------------------------------------------------------------

    def _kf_id(self, i: int) -> NodeId:
        return NodeId(self.agent, "keyframe", i)

    def _wall_id(self, i: int) -> NodeId:
        return NodeId(self.agent, "wall", i)

    # -- keyframes ----------------------------------------------------------

    def insert_keyframe(self, odom_meas: Pose | None, scan: PointCloud,
                        plane_obs, odom_sigmas=(0.0, 0.0)) -> NodeId:
        """Add a keyframe from the odometry step and its plane observations.

        plane_obs: list of (body-frame Plane, 3x3 covariance).
        odom_sigmas: (translation, rotation) std of this odometry step.
        """
        cfg = self.cfg
        idx = len(self.keyframes)
        node = self._kf_id(idx)
        if idx == 0:
            est = Pose.identity()
            dead = Pose.identity()
            self.graph.add_node(node, est, fixed=True)
        else:
            prev = self.keyframes[-1]
            est = self.graph.state(prev.node).compose(odom_meas)
            dead = prev.odom_pose.compose(odom_meas)
            self.graph.add_node(node, est)
            st = max(odom_sigmas[0], cfg.odom_sigma_floor[0])
            sr = max(odom_sigmas[1], cfg.odom_sigma_floor[1])
            info = np.diag([1 / sr**2] * 3 + [1 / st**2] * 3)
            self.graph.add_factor("odometry", [prev.node, node], odom_meas, info)

        for plane_body, cov in plane_obs:
            obs_map = transform_plane(est, plane_body)
            wall = self.associate_plane(obs_map)
            if wall is None:
                wall = self._wall_id(len(self.wall_nodes))
                self.graph.add_node(wall, obs_map.canonical())
                self.wall_nodes.append(wall)
            floor = self.cfg.plane_sigma_floor
            sig = np.sqrt(np.maximum(np.diag(cov), floor**2))
            self.graph.add_factor("pose_plane", [node, wall],
                                  plane_body.canonical(), np.diag(1.0 / sig**2))
            self._grow_wall_extent(wall, plane_body, scan, est)

        kf = Keyframe(node, scan, dead)
        self.keyframes.append(kf)
        self._update_memberships(node, est)
        return node

    def _grow_wall_extent(self, wall: NodeId, plane_body: Plane,
                          scan: PointCloud, est: Pose) -> None:
        """Widen the wall's observed footprint with this frame's supporting
        scan points; the footprint gates room pairing so a plane glimpsed
        through a door from another room cannot bound this one."""
        if scan.empty:
            return
        d = np.abs(scan.points @ plane_body.normal + plane_body.offset)
        support = scan.points[d < self.cfg.extent_band]
        if support.shape[0] == 0:
            return
        xy = est.apply(support)[:, :2]
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        box = self.wall_extents.get(wall)
        if box is None:
            self.wall_extents[wall] = np.array([lo, hi])
        else:
            box[0] = np.minimum(box[0], lo)
            box[1] = np.maximum(box[1], hi)

    def _extent_covers_foot(self, wall: NodeId, foot: np.ndarray) -> bool:
        box = self.wall_extents.get(wall)
        if box is None:
            return False
        gap = np.maximum(box[0] - foot, 0.0) + np.maximum(foot - box[1], 0.0)
        return float(np.hypot(*gap)) <= self.cfg.extent_reach

    def associate_plane(self, obs_map: Plane) -> NodeId | None:
        """Nearest existing wall within the angle/offset gates, or None."""
        cfg = self.cfg
        best, best_off = None, np.inf
        for wall in self.wall_nodes:
            angle, doff = plane_gap(self.graph.state(wall), obs_map)
            if angle <= np.deg2rad(cfg.assoc_angle_deg) and doff <= cfg.assoc_offset:
                if doff < best_off:
                    best, best_off = wall, doff
        return best

    # -- rooms --------------------------------------------------------------

    def _oriented_walls(self, position: np.ndarray):
        """Vertical walls oriented toward `position`, with their distances."""
        out = []
        p = np.array([position[0], position[1], 0.0])
        for wall in self.wall_nodes:
            plane = self.graph.state(wall)
            if abs(plane.normal[2]) > 0.3:
                continue
            s = float(plane.distance(p))
            dist = abs(s)
            if dist < self.cfg.min_wall_distance or dist > self.cfg.room_gap[1]:
                continue
            foot = (p - s * plane.normal)[:2]
            if not self._extent_covers_foot(wall, foot):
                continue
            sign = 1.0 if s >= 0 else -1.0
            oriented = plane if sign > 0 else plane.flipped()
            out.append((wall, oriented, dist, sign))
        return out

    def _vertical_wall_distances(self, position: np.ndarray):
        """(normal, |distance|) of every vertical wall, with no distance floor."""
        p = np.array([position[0], position[1], 0.0])
        out = []
        for wall in self.wall_nodes:
            plane = self.graph.state(wall)
            if abs(plane.normal[2]) > 0.3:
                continue
            out.append((plane.normal, abs(float(plane.distance(p)))))
        return out

    def detect_rooms(self) -> list[RoomRecord]:
        """Four-wall rooms around the newest keyframe: two facing pairs with
        roughly perpendicular axes and sane gaps.  Idempotent per quadruple."""
        if not self.keyframes:
            return []
        cfg = self.cfg
        pos = self.graph.state(self.keyframes[-1].node).t
        cands = self._oriented_walls(pos)
        all_vertical = self._vertical_wall_distances(pos)
        cos_pair = np.cos(np.deg2rad(cfg.pair_angle_deg))
        cos_blocking = np.cos(np.deg2rad(cfg.perp_angle_deg))
        pairs = []
        for i in range(len(cands)):
            for j in range(i + 1, len(cands)):
                wi, pi, di, _ = cands[i]
                wj, pj, dj, _ = cands[j]
                if float(pi.normal @ pj.normal) > -cos_pair:
                    continue
                gap = di + dj
                if not (cfg.room_gap[0] <= gap <= cfg.room_gap[1]):
                    continue
                axis = pi.normal[:2] - pj.normal[:2]
                axis = axis / np.linalg.norm(axis)
                # the pair must be the closest parallel planes around the
                # robot, else it spans a doorway into the next room
                axis3 = np.array([axis[0], axis[1], 0.0])
                nearest = min(di, dj)
                blocked = any(
                    abs(float(n @ axis3)) >= cos_blocking and d < nearest - 0.05
                    for n, d in all_vertical)
                if blocked:
                    continue
                pairs.append((gap, i, j, axis))
        # keep only the nearest pair per direction
        pairs.sort(key=lambda t: (t[0], t[1], t[2]))
        kept = []
        cos_same = np.cos(np.deg2rad(cfg.perp_angle_deg))
        for cand in pairs:
            if all(abs(float(cand[3] @ k[3])) < cos_same for k in kept):
                kept.append(cand)
        new_rooms = []
        for a in range(len(kept)):
            for b in range(a + 1, len(kept)):
                gx, i1, j1, ax = kept[a]
                gy, i2, j2, ay = kept[b]
                if abs(float(ax @ ay)) > 0.5:  # need near-perpendicular axes
                    continue
                ids = {cands[k][0] for k in (i1, j1, i2, j2)}
                if len(ids) < 4 or frozenset(ids) in self._room_wall_sets:
                    continue
                record = self._create_room(
                    [cands[k] for k in (i1, j1, i2, j2)], (gx, gy))
                if record is not None:
                    new_rooms.append(record)
        return new_rooms

    def _create_room(self, quad, gaps) -> RoomRecord | None:
        from .geometry import DegeneratePairError

        walls = tuple(q[0] for q in quad)
        oriented = [q[1] for q in quad]
        signs = np.array([q[3] for q in quad])
        try:
            center = room_center_from_walls(oriented)
        except DegeneratePairError:
            return None
        axis = oriented[0].normal[:2] - oriented[1].normal[:2]
        axis = axis / np.linalg.norm(axis)
        if axis[0] < 0 or (axis[0] == 0 and axis[1] < 0):
            axis = -axis
        frame = RoomFrame(center, float(np.arctan2(axis[1], axis[0])),
                          floor_z=-self.cfg.mount_height)
        node = NodeId(self.agent, "room", self._n_rooms)
        self._n_rooms += 1
        self.graph.add_node(node, center.copy())
        info = np.eye(2) / self.cfg.room_sigma**2
        self.graph.add_factor("room_wall", [node, *walls], signs.copy(), info)
        record = RoomRecord(node, walls, signs, frame,
                            np.array([gaps[0], gaps[1]]))
        self._room_wall_sets.add(frozenset(walls))
        # membership of every keyframe estimated inside the rectangle
        for kf in self.keyframes:
            if self._inside_room(record, self.graph.state(kf.node).t):
                record.members.append(kf.node)
        self.rooms.append(record)
        return record

    def _inside_room(self, record: RoomRecord, position: np.ndarray) -> bool:
        p = np.array([position[0], position[1], 0.0])
        for wall, sign in zip(record.walls, record.signs):
            plane = self.graph.state(wall)
            if sign * plane.distance(p) < -self.cfg.member_slack:
                return False
        return True

    def _update_memberships(self, node: NodeId, est: Pose) -> None:
        for record in self.rooms:
            if self._inside_room(record, est.t):
                record.members.append(node)

    def room_center(self, walls: list[Plane]) -> np.ndarray:
        """Analytic center of four inward-oriented walls (pair order)."""
        return room_center_from_walls(walls)

    def oriented_room_walls(self, record: RoomRecord) -> list[Plane]:
        return [self.graph.state(w) if s > 0 else self.graph.state(w).flipped()
                for w, s in zip(record.walls, record.signs)]

    # -- floor --------------------------------------------------------------

    def update_floor(self) -> None:
        """(Re)pin the floor node at the mean of the room centers."""
        if not self.rooms:
            return
        centers = np.array([self.graph.state(r.node) for r in self.rooms])
        state = np.array([centers[:, 0].mean(), centers[:, 1].mean(), 0.0])
        if self.floor_node is None:
            self.floor_node = NodeId(self.agent, "floor", 0)
            self.graph.add_node(self.floor_node, state, fixed=True)
        else:
            self.graph.set_state(self.floor_node, state)

    # -- estimation ---------------------------------------------------------

    def optimize(self, config: OptimizeConfig | None = None) -> OptimizeResult:
        return self.graph.optimize(config)

    def trajectory(self) -> list[Pose]:
        return [self.graph.state(kf.node) for kf in self.keyframes]

    def dead_reckoning(self) -> list[Pose]:
        return [kf.odom_pose for kf in self.keyframes]

    @property
    def current_pose(self) -> Pose:
        if not self.keyframes:
            return Pose.identity()
        return self.graph.state(self.keyframes[-1].node)

    def member_scans(self, record: RoomRecord):
        """(estimated pose, body points) for each member keyframe."""
        by_node = {kf.node: kf for kf in self.keyframes}
        out = []
        for node in record.members:
            kf = by_node[node]
            out.append((self.graph.state(node), kf.scan.points))
        return out
