"""Collaborative graph: peer snapshots, inter-robot match factors, joint solve.

Each received distilled snapshot becomes an imported subgraph: a free origin
pose node per peer plus wall/room nodes expressed in the peer's own frame and
anchored there by prior factors.  Until a room match arrives those subgraphs
are disconnected from the local map ("isolated" stage).  An accepted match
adds a room-to-room factor (and, in wall modes, wall-to-wall factors) through
the peer origin node, which then absorbs the frame alignment during the joint
optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptor import RoomMatch
from .distill import DistilledGraph, DistilledRoom
from .factor_graph import (
    Factor,
    FactorGraph,
    NodeId,
    OptimizeConfig,
    OptimizeResult,
    PlanarMatchMeasurement,
)
from .geometry import Plane, Pose, transform_plane
from .local_graph import LocalGraph, RoomRecord


class StaleMessageError(RuntimeError):
    """A distilled snapshot older than the last integrated one arrived."""


class WallPairingError(RuntimeError):
    """No unique wall assignment exists for a matched room pair."""


@dataclass(frozen=True)
class AblationMode:
    name: str
    use_walls: bool
    fine_alignment: bool


MODES = {
    "rooms": AblationMode("rooms", False, False),
    "rooms_fa": AblationMode("rooms_fa", False, True),
    "rooms_walls": AblationMode("rooms_walls", True, False),
    "full": AblationMode("full", True, True),
}


@dataclass
class CollabConfig:
    fitness_floor: float = 0.01        # registration quality floor, meters
    non_fa_downweight: float = 10.0    # info scaling of seed-only matches
    wall_match_sigma: tuple[float, float] = (0.02, 0.02)  # rad, m
    pairing_angle_deg: float = 15.0
    origin_aux_info: float = 1e4       # pins z/roll/pitch of the peer origin
    prior_cov_floor: float = 1e-8


@dataclass
class PeerState:
    agent: int
    origin: NodeId
    seq: int = -1
    walls: dict[int, NodeId] = field(default_factory=dict)
    wall_priors: dict[int, Factor] = field(default_factory=dict)
    rooms: dict[int, NodeId] = field(default_factory=dict)
    room_factors: dict[int, Factor] = field(default_factory=dict)
    room_meta: dict[int, DistilledRoom] = field(default_factory=dict)
    floor: np.ndarray | None = None
    collaborative: bool = False
    origin_initialized: bool = False


@dataclass
class MatchRecord:
    match: RoomMatch
    factors: list[Factor]
    wall_pairs: list[tuple[NodeId, NodeId]]
    wall_pairing_failed: bool = False


def _planar(x: float, y: float, yaw: float) -> Pose:
    return Pose.from_xyz_yaw(x, y, 0.0, yaw)


class CollabGraph:
    def __init__(self, local: LocalGraph, config: CollabConfig | None = None):
        self.local = local
        self.cfg = config or CollabConfig()
        self.peers: dict[int, PeerState] = {}
        self.matches: list[MatchRecord] = []

    @property
    def graph(self) -> FactorGraph:
        return self.local.graph

    def stage(self, agent: int) -> str:
        peer = self.peers.get(agent)
        return "collaborative" if peer is not None and peer.collaborative else "isolated"

    def origin_estimate(self, agent: int) -> Pose:
        return self.graph.state(self.peers[agent].origin)

    # -- snapshot integration -------------------------------------------------

    def integrate_distilled(self, msg: DistilledGraph) -> None:
        """Create/update the imported subgraph for one peer snapshot.

        States are replaced in place (node ids are stable across updates) and
        the anchoring priors are refreshed from the transmitted covariances.
        """
        peer = self.peers.get(msg.sender)
        if peer is None:
            origin = NodeId(msg.sender, "origin", 0)
            self.graph.add_node(origin, Pose.identity())
            peer = PeerState(msg.sender, origin)
            self.peers[msg.sender] = peer
        if msg.seq <= peer.seq:
            raise StaleMessageError(
                f"snapshot seq {msg.seq} from agent {msg.sender} is not newer "
                f"than {peer.seq}")
        peer.seq = msg.seq

        for wall in msg.walls:
            cov = wall.covariance + self.cfg.prior_cov_floor * np.eye(3)
            info = np.linalg.inv(cov)
            info = 0.5 * (info + info.T)
            node = peer.walls.get(wall.index)
            plane = Plane(wall.plane.normal, wall.plane.offset, wall.covariance)
            if node is None:
                node = NodeId(msg.sender, "wall", wall.index)
                self.graph.add_node(node, plane)
                peer.walls[wall.index] = node
            else:
                self.graph.set_state(node, plane)
                self.graph.factors.remove(peer.wall_priors[wall.index])
            peer.wall_priors[wall.index] = self.graph.add_factor(
                "prior", [node], plane.canonical(), info)

        for room in msg.rooms:
            node = peer.rooms.get(room.index)
            if node is None:
                node = NodeId(msg.sender, "room", room.index)
                self.graph.add_node(node, room.center.copy())
                peer.rooms[room.index] = node
            else:
                self.graph.set_state(node, room.center.copy())
                old = peer.room_factors.get(room.index)
                if old is not None:
                    self.graph.factors.remove(old)
            wall_nodes = [peer.walls[i] for i in room.wall_indices]
            center3 = np.array([room.center[0], room.center[1], 0.0])
            signs = np.array([
                1.0 if self.graph.state(w).distance(center3) >= 0 else -1.0
                for w in wall_nodes
            ])
            peer.room_factors[room.index] = self.graph.add_factor(
                "room_wall", [node, *wall_nodes], signs,
                np.eye(2) / self.local.cfg.room_sigma**2)
            peer.room_meta[room.index] = room

        peer.floor = None if msg.floor is None else msg.floor.copy()

    # -- match factors ---------------------------------------------------------

    def _match_measurement(self, match: RoomMatch, mode: AblationMode,
                           local_yaw: float, peer_yaw: float) -> PlanarMatchMeasurement:
        if mode.fine_alignment:
            if match.alignment is None:
                raise ValueError("fine-alignment mode needs an alignment pose")
            return PlanarMatchMeasurement(match.alignment.t[:2],
                                          match.alignment.yaw, local_yaw, peer_yaw)
        return PlanarMatchMeasurement(np.zeros(2), match.yaw_seed,
                                      local_yaw, peer_yaw)

    def _match_information(self, match: RoomMatch, mode: AblationMode) -> np.ndarray:
        base = np.diag([1.0, 1.0, 2.0])
        floor = self.cfg.fitness_floor
        if mode.fine_alignment:
            sigma = max(match.fitness if match.fitness is not None else floor, floor)
            return base / sigma**2
        return base / floor**2 / self.cfg.non_fa_downweight

    def _implied_origin(self, meas: PlanarMatchMeasurement, room_a: np.ndarray,
                        room_b: np.ndarray) -> Pose:
        A = _planar(room_a[0], room_a[1], meas.yaw_a)
        M = _planar(meas.t[0], meas.t[1], meas.yaw)
        B = _planar(room_b[0], room_b[1], meas.yaw_b)
        return A.compose(M).compose(B.inverse())

    def _pair_walls(self, record: RoomRecord, peer: PeerState,
                    room_meta: DistilledRoom, origin: Pose):
        """Pair local room walls with peer room walls by normal direction in
        the local frame; requires a unique assignment within the angle gate."""
        gate = np.cos(np.deg2rad(self.cfg.pairing_angle_deg))
        local = [(w, self.graph.state(w) if s > 0 else self.graph.state(w).flipped())
                 for w, s in zip(record.walls, record.signs)]
        center3 = np.array([*self.graph.state(peer.rooms[room_meta.index]), 0.0])
        center_local = origin.apply(center3)
        remote = []
        for idx in room_meta.wall_indices:
            node = peer.walls[idx]
            mapped = transform_plane(origin, self.graph.state(node))
            # transform_plane canonicalizes; restore the inward orientation
            if mapped.distance(center_local) < 0:
                mapped = mapped.flipped()
            remote.append((node, mapped))
        scored = []
        for li, (lnode, lplane) in enumerate(local):
            for ri, (rnode, rplane) in enumerate(remote):
                c = float(lplane.normal @ rplane.normal)
                if c >= gate:
                    scored.append((-c, li, ri))
        scored.sort()
        used_l, used_r, pairs = set(), set(), []
        for _, li, ri in scored:
            if li in used_l or ri in used_r:
                continue
            used_l.add(li)
            used_r.add(ri)
            pairs.append((local[li][0], remote[ri][0]))
        if len(pairs) != 4:
            raise WallPairingError(
                f"only {len(pairs)} of 4 walls paired within the angle gate")
        return pairs

    def add_match_factors(self, match: RoomMatch, mode: AblationMode,
                          record: RoomRecord, peer_yaw: float) -> MatchRecord:
        """Tie a matched room pair together: one room-to-room factor, plus
        wall-to-wall factors in wall modes (falling back to room-only when no
        unique wall pairing exists)."""
        peer = self.peers[match.peer]
        room_node = peer.rooms[match.peer_room]
        meas = self._match_measurement(match, mode, record.frame.yaw, peer_yaw)
        info = self._match_information(match, mode)

        if not peer.origin_initialized:
            implied = self._implied_origin(meas, self.graph.state(record.node),
                                           self.graph.state(room_node))
            self.graph.set_state(peer.origin, implied)
            aux = self.cfg.origin_aux_info
            aux_info = np.diag([aux, aux, 1e-9, 1e-9, 1e-9, aux])
            self.graph.add_factor("prior", [peer.origin], implied, aux_info)
            peer.origin_initialized = True

        factors = [self.graph.add_factor(
            "room_match", [peer.origin, record.node, room_node], meas, info,
            robust=True)]
        pairs = []
        failed = False
        if mode.use_walls:
            try:
                pairs = self._pair_walls(record, peer, peer.room_meta[match.peer_room],
                                         self.graph.state(peer.origin))
            except WallPairingError:
                failed = True
                pairs = []
            sn, sd = self.cfg.wall_match_sigma
            wall_info = np.diag([1 / sn**2, 1 / sn**2, 1 / sd**2])
            for lnode, rnode in pairs:
                factors.append(self.graph.add_factor(
                    "wall_match", [peer.origin, lnode, rnode], None, wall_info,
                    robust=True))
        peer.collaborative = True
        rec = MatchRecord(match, factors, pairs, failed)
        self.matches.append(rec)
        return rec

    # -- optimization ---------------------------------------------------------

    def optimize_collaborative(self, config: OptimizeConfig | None = None) -> OptimizeResult:
        if not any(p.collaborative for p in self.peers.values()):
            raise RuntimeError("no collaborative peer: nothing to align")
        return self.graph.optimize(config)
