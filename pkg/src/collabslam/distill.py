"""Compact origin-anchored snapshots of a local graph for broadcast.

A distilled graph keeps only the semantic layers: every wall (with its
marginal covariance), every room with its four wall references, and the floor
center, all expressed in the sender's map frame.  Keyframes and point data
never leave the robot this way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Plane, plane_gap
from .local_graph import LocalGraph


@dataclass
class DistilledWall:
    index: int
    plane: Plane
    covariance: np.ndarray

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(3, 3)


@dataclass
class DistilledRoom:
    index: int
    center: np.ndarray
    wall_indices: tuple[int, int, int, int]  # x pair then y pair

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        self.wall_indices = tuple(int(i) for i in self.wall_indices)


@dataclass
class DistilledGraph:
    sender: int
    seq: int
    walls: list[DistilledWall] = field(default_factory=list)
    rooms: list[DistilledRoom] = field(default_factory=list)
    floor: np.ndarray | None = None

    def wall_by_index(self, index: int) -> DistilledWall:
        for w in self.walls:
            if w.index == index:
                return w
        raise KeyError(index)


def distill(local: LocalGraph, seq: int, include_covariances: bool = True) -> DistilledGraph:
    """Snapshot the wall/room/floor layers of a local graph.

    Wall covariances come from the current Gauss-Newton marginals; pass
    include_covariances=False for a cheap structural snapshot (used to decide
    whether a rebroadcast is worth it).
    """
    if include_covariances and local.wall_nodes:
        covs = local.graph.marginal_covariance(local.wall_nodes)
    else:
        covs = {w: np.zeros((3, 3)) for w in local.wall_nodes}
    walls = [
        DistilledWall(w.index, local.graph.state(w).canonical(), covs[w])
        for w in local.wall_nodes
    ]
    rooms = [
        DistilledRoom(r.node.index, local.graph.state(r.node),
                      tuple(w.index for w in r.walls))
        for r in local.rooms
    ]
    floor = None
    if local.floor_node is not None:
        floor = np.asarray(local.graph.state(local.floor_node), dtype=float).copy()
    return DistilledGraph(local.agent, seq, walls, rooms, floor)


def should_rebroadcast(prev: DistilledGraph | None, nxt: DistilledGraph,
                       offset_tol: float = 0.05, angle_tol_deg: float = 2.0,
                       center_tol: float = 0.05) -> bool:
    """True when the snapshot changed enough to be worth sending again:
    node counts differ, a wall moved beyond the offset/angle gates, or a room
    center moved beyond the center gate."""
    if prev is None:
        return True
    if len(prev.walls) != len(nxt.walls) or len(prev.rooms) != len(nxt.rooms):
        return True
    if (prev.floor is None) != (nxt.floor is None):
        return True
    prev_walls = {w.index: w for w in prev.walls}
    angle_tol = np.deg2rad(angle_tol_deg)
    for w in nxt.walls:
        old = prev_walls.get(w.index)
        if old is None:
            return True
        angle, doff = plane_gap(old.plane, w.plane)
        if angle > angle_tol or doff > offset_tol:
            return True
    prev_rooms = {r.index: r for r in prev.rooms}
    for r in nxt.rooms:
        old = prev_rooms.get(r.index)
        if old is None or old.wall_indices != r.wall_indices:
            return True
        if np.linalg.norm(old.center - r.center) > center_tol:
            return True
    return False
