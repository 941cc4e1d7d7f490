"""Scenario orchestration: N agents, one channel, deterministic tick loop.

Each tick every agent (in fixed order) drains its inbox, advances one
keyframe along its route, updates rooms/floor, re-optimizes, and broadcasts
whatever changed.  Room matching runs opportunistically: seed-only modes
accept matches straight from the descriptor store, fine-alignment modes first
fetch the peer's room cloud and register it.  The run ends with a final joint
optimization and the evaluation metrics.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collab import MODES, AblationMode, CollabConfig, CollabGraph, StaleMessageError
from .comms import (
    MSG_CLOUD_REQUEST,
    MSG_CLOUD_RESPONSE,
    MSG_DESCRIPTOR,
    MSG_DISTILLED,
    Channel,
    CloudResponse,
    UnknownRoomError,
)
from .descriptor import (
    AlignConfig,
    AlignmentRejectedError,
    DescriptorConfig,
    EmptyRoomCloudError,
    MatchCandidate,
    RoomMatch,
    build_room_cloud,
    fine_align,
    make_descriptor,
    match_rooms,
)
from .distill import distill, should_rebroadcast
from .factor_graph import OptimizeConfig
from .geometry import Pose, pose_error, quat_to_rotvec, voxel_downsample_points
from .local_graph import FrontEndConfig, LocalGraph
from .metrics import aggregate_ate, compute_ate, compute_map_rmse
from .world import (
    Scenario,
    World,
    generate_trajectory,
    generate_world,
    load_scenario,
    observe_planes,
    raycast_scan,
    step_odometry,
)

_WORLD_CACHE: dict[tuple[str, int], World] = {}


@dataclass
class PipelineConfig:
    mode: AblationMode
    sc_threshold: float = 0.35
    icp_threshold: float = 0.07
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    descriptor_min_members: int = 8
    descriptor_regrow: int = 15
    distill_check_every: int = 3
    collab_every: int = 10
    room_cloud_margin: float = 1.0
    step_optimize: OptimizeConfig = field(
        default_factory=lambda: OptimizeConfig(max_iterations=4))
    final_optimize: OptimizeConfig = field(
        default_factory=lambda: OptimizeConfig(max_iterations=60))

    @staticmethod
    def from_scenario(scenario: Scenario, mode: AblationMode) -> "PipelineConfig":
        p = scenario.pipeline
        d = p.get("descriptor", {})
        return PipelineConfig(
            mode=mode,
            sc_threshold=float(p.get("sc_threshold", 0.35)),
            icp_threshold=float(p.get("icp_threshold", 0.07)),
            descriptor=DescriptorConfig(
                n_sectors=int(d.get("sectors", 60)),
                n_rings=int(d.get("rings", 20)),
                max_radius=float(d.get("max_radius", 10.0)),
                voxel=float(d.get("voxel", 0.1)),
            ),
            descriptor_min_members=int(p.get("descriptor_min_members", 8)),
            descriptor_regrow=int(p.get("descriptor_regrow", 15)),
            distill_check_every=int(p.get("distill_check_every", 3)),
            collab_every=int(p.get("collab_every", 10)),
            room_cloud_margin=float(p.get("room_cloud_margin", 1.0)),
        )


@dataclass
class RunReport:
    scenario: str
    mode: str
    seed: int
    accounting: str
    robots: list
    aggregate_ate_cm: float
    odometry_ate_cm: float
    map_rmse_cm: float
    origin_errors: list
    matches: dict
    bytes: dict
    messages: dict
    final_cost: float
    timings: dict

    def canonical_dict(self) -> dict:
        """Deterministic content: everything except wall-clock timings."""
        out = {
            "scenario": self.scenario,
            "mode": self.mode,
            "seed": self.seed,
            "accounting": self.accounting,
            "robots": self.robots,
            "aggregate_ate_cm": self.aggregate_ate_cm,
            "odometry_ate_cm": self.odometry_ate_cm,
            "map_rmse_cm": self.map_rmse_cm,
            "origin_errors": self.origin_errors,
            "matches": self.matches,
            "bytes": self.bytes,
            "messages": self.messages,
            "final_cost": self.final_cost,
        }
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_dict(), sort_keys=True)

    def to_json(self) -> str:
        d = self.canonical_dict()
        d["timings"] = self.timings
        return json.dumps(d, sort_keys=True, indent=2)


class Agent:
    """One robot: local graph + collaborative state + protocol handling."""

    def __init__(self, agent_id: int, world: World, gt_poses: list[Pose],
                 sensor, channel: Channel, cfg: PipelineConfig,
                 rng: np.random.Generator):
        self.id = agent_id
        self.world = world
        self.gt = gt_poses
        self.sensor = sensor
        self.channel = channel
        self.cfg = cfg
        self.rng = rng
        fe = FrontEndConfig(mount_height=sensor.mount_height)
        self.local = LocalGraph(agent_id, fe)
        self.collab = CollabGraph(self.local)
        self.peer_descriptors: dict[tuple[int, int], object] = {}
        self.own_descriptors: dict[int, object] = {}
        self._desc_members: dict[int, int] = {}
        self._prev_distilled = None
        self._distill_seq = 0
        self._pending: dict[tuple[int, int, int], MatchCandidate] = {}
        self._attempted: set[tuple[int, int, int]] = set()
        self._match_dirty = False
        self.match_stats = {"candidates": 0, "accepted": 0, "rejected": 0}
        self.timers = {"sense": 0.0, "optimize": 0.0, "registration": 0.0}

    # -- room clouds ----------------------------------------------------------

    def _room_record(self, room_index: int):
        for r in self.local.rooms:
            if r.index == room_index:
                return r
        return None

    def downsampled_room_cloud(self, room_index: int) -> np.ndarray:
        """The voxel-downsampled float32 room cloud (what goes on the wire and
        under the descriptor)."""
        record = self._room_record(room_index)
        if record is None or not record.members:
            raise UnknownRoomError(room_index)
        raw = build_room_cloud(record.frame, record.extents,
                               self.local.member_scans(record),
                               margin=self.cfg.room_cloud_margin)
        return voxel_downsample_points(raw, self.cfg.descriptor.voxel).astype(np.float32)

    def respond_cloud_request(self, room_index: int) -> CloudResponse:
        """Answer a peer's request for one of our room clouds."""
        pts = self.downsampled_room_cloud(room_index)  # raises UnknownRoomError
        return CloudResponse(0, room_index, True, pts)

    # -- per-tick pipeline ------------------------------------------------------

    def step(self, tick: int) -> None:
        self._process_messages()
        if tick < len(self.gt):
            self._sense_and_insert(tick)
            self.local.detect_rooms()
            self.local.update_floor()
            t0 = time.perf_counter()
            self.local.optimize(self.cfg.step_optimize)
            self.timers["optimize"] += time.perf_counter() - t0
            self._broadcast_descriptors()
            if tick % self.cfg.distill_check_every == 0 or tick == len(self.gt) - 1:
                self._broadcast_distilled()
        self._try_matches()

    def _sense_and_insert(self, tick: int) -> None:
        t0 = time.perf_counter()
        pose = self.gt[tick]
        scan = raycast_scan(self.world, pose, self.sensor, self.rng)
        obs = observe_planes(self.world, pose, self.sensor, self.rng)
        self.timers["sense"] += time.perf_counter() - t0
        if tick == 0:
            self.local.insert_keyframe(None, scan, obs)
            return
        prev = self.gt[tick - 1]
        odom = step_odometry(prev, pose, self.sensor, self.rng)
        rel = prev.inverse().compose(pose)
        d = float(np.linalg.norm(rel.t))
        turn = float(np.linalg.norm(quat_to_rotvec(rel.q)))
        sig = (self.sensor.odom_trans_sigma * np.sqrt(d),
               self.sensor.odom_yaw_sigma * np.sqrt(turn))
        self.local.insert_keyframe(odom, scan, obs, odom_sigmas=sig)

    def _process_messages(self) -> None:
        for env in self.channel.poll(self.id):
            msg = env.message()
            if env.msg_type == MSG_DISTILLED:
                try:
                    self.collab.integrate_distilled(msg)
                except StaleMessageError:
                    pass
            elif env.msg_type == MSG_DESCRIPTOR:
                self.peer_descriptors[(env.sender, msg.room_index)] = msg
                self._match_dirty = True
            elif env.msg_type == MSG_CLOUD_REQUEST:
                if msg.target != self.id:
                    continue
                try:
                    resp = self.respond_cloud_request(msg.room_index)
                    resp.target = env.sender
                except (UnknownRoomError, EmptyRoomCloudError):
                    resp = CloudResponse(env.sender, msg.room_index, False,
                                         np.zeros((0, 3), np.float32))
                self.channel.send(self.id, env.sender, resp)
            elif env.msg_type == MSG_CLOUD_RESPONSE:
                if msg.target == self.id:
                    self._handle_cloud_response(env.sender, msg)

    # -- broadcasts -------------------------------------------------------------

    def _broadcast_descriptors(self) -> None:
        for record in self.local.rooms:
            members = len(record.members)
            last = self._desc_members.get(record.index)
            due = (last is None and members >= self.cfg.descriptor_min_members) or \
                  (last is not None and members - last >= self.cfg.descriptor_regrow)
            if not due:
                continue
            try:
                pts = self.downsampled_room_cloud(record.index)
            except (UnknownRoomError, EmptyRoomCloudError):
                continue
            desc = make_descriptor(pts, self.cfg.descriptor, owner=self.id,
                                   room_index=record.index,
                                   extents=record.extents,
                                   frame_yaw=record.frame.yaw)
            self.own_descriptors[record.index] = desc
            self._desc_members[record.index] = members
            self._match_dirty = True
            self.channel.broadcast(self.id, desc)

    def _broadcast_distilled(self) -> None:
        light = distill(self.local, self._distill_seq, include_covariances=False)
        if not should_rebroadcast(self._prev_distilled, light):
            return
        full = distill(self.local, self._distill_seq, include_covariances=True)
        self.channel.broadcast(self.id, full)
        self._prev_distilled = light
        self._distill_seq += 1

    # -- matching ----------------------------------------------------------------

    def _try_matches(self) -> None:
        if not self._match_dirty:
            return
        if not self.own_descriptors or not self.peer_descriptors:
            return
        self._match_dirty = False
        exclude = self._attempted | set(self._pending)
        candidates = match_rooms(list(self.own_descriptors.values()),
                                 self.peer_descriptors, self.cfg.sc_threshold,
                                 exclude=exclude)
        for cand in candidates:
            peer = self.collab.peers.get(cand.peer)
            if peer is None or cand.peer_room not in peer.rooms:
                self._match_dirty = True  # retry once the snapshot arrives
                continue
            record = self._room_record(cand.local_room)
            if record is None:
                continue
            self.match_stats["candidates"] += 1
            key = (cand.local_room, cand.peer, cand.peer_room)
            if self.cfg.mode.fine_alignment:
                self._pending[key] = cand
                self.channel.request_cloud(self.id, cand.peer, cand.peer_room)
            else:
                match = RoomMatch(cand.local_room, cand.peer, cand.peer_room,
                                  cand.distance, cand.yaw_seed)
                self._attempted.add(key)
                self._accept_match(match, record)

    def _handle_cloud_response(self, sender: int, msg: CloudResponse) -> None:
        match_key = next((k for k in self._pending
                          if k[1] == sender and k[2] == msg.room_index), None)
        if match_key is None:
            return
        cand = self._pending.pop(match_key)
        self._attempted.add(match_key)
        if not msg.found or len(msg.points) == 0:
            self.match_stats["rejected"] += 1
            return
        record = self._room_record(cand.local_room)
        if record is None:
            return
        try:
            local_cloud = self.downsampled_room_cloud(cand.local_room)
        except (UnknownRoomError, EmptyRoomCloudError):
            return
        t0 = time.perf_counter()
        try:
            pose, fitness = fine_align(
                local_cloud.astype(float), msg.points.astype(float),
                cand.yaw_seed,
                AlignConfig(accept_threshold=self.cfg.icp_threshold))
        except (AlignmentRejectedError, EmptyRoomCloudError):
            self.match_stats["rejected"] += 1
            return
        finally:
            self.timers["registration"] += time.perf_counter() - t0
        match = RoomMatch(cand.local_room, cand.peer, cand.peer_room,
                          cand.distance, cand.yaw_seed, pose, fitness)
        self._accept_match(match, record)

    def _accept_match(self, match: RoomMatch, record) -> None:
        peer_desc = self.peer_descriptors.get((match.peer, match.peer_room))
        if peer_desc is None:
            return
        self.collab.add_match_factors(match, self.cfg.mode, record,
                                      peer_desc.frame_yaw)
        self.match_stats["accepted"] += 1
        t0 = time.perf_counter()
        self.collab.optimize_collaborative(
            OptimizeConfig(max_iterations=40))
        self.timers["optimize"] += time.perf_counter() - t0

    # -- evaluation helpers --------------------------------------------------------

    def merged_cloud_points(self) -> np.ndarray:
        """Own keyframe clouds at optimized poses, in the agent map frame."""
        parts = []
        for kf in self.local.keyframes:
            if len(kf.scan) == 0:
                continue
            parts.append(self.local.graph.state(kf.node).apply(kf.scan.points))
        if not parts:
            return np.zeros((0, 3))
        return np.concatenate(parts, axis=0)


def run_scenario(scenario, mode: str | AblationMode, seed: int,
                 accounting: str = "broadcast", out_dir=None,
                 figures: bool = True) -> RunReport:
    """Deterministic co-simulation of a scenario under one ablation mode."""
    t_start = time.perf_counter()
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    if isinstance(mode, str):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
        mode = MODES[mode]
    cfg = PipelineConfig.from_scenario(scenario, mode)

    cache_key = (scenario.name, seed)
    world = _WORLD_CACHE.get(cache_key)
    if world is None:
        world = generate_world(scenario.world_spec, seed)
        _WORLD_CACHE[cache_key] = world

    gts = [generate_trajectory(t, scenario.sensor) for t in scenario.trajectories]
    ids = list(range(len(gts)))
    channel = Channel(ids, accounting=accounting)
    streams = np.random.SeedSequence((seed, 0xA6E27)).spawn(len(ids))
    agents = [Agent(i, world, gts[i], scenario.sensor, channel, cfg,
                    np.random.default_rng(streams[i])) for i in ids]

    ticks = max(len(g) for g in gts) + 6
    for tick in range(ticks):
        for agent in agents:
            agent.step(tick)
        channel.advance_tick()

    t0 = time.perf_counter()
    final_cost = 0.0
    for agent in agents:
        res = agent.local.optimize(cfg.final_optimize)
        final_cost = max(final_cost, res.final_cost)
    t_final = time.perf_counter() - t0

    # --- metrics ---------------------------------------------------------
    robots = []
    traj_pairs = []
    odo_pairs = []
    for agent in agents:
        gt_agent = [gts[agent.id][0].inverse().compose(p) for p in gts[agent.id]]
        est = agent.local.trajectory()
        dead = agent.local.dead_reckoning()
        ate = compute_ate(est, gt_agent)
        odo = compute_ate(dead, gt_agent)
        traj_pairs.append((est, gt_agent))
        odo_pairs.append((dead, gt_agent))
        robots.append({
            "id": agent.id,
            "ate_cm": ate.rmse_cm,
            "odometry_ate_cm": odo.rmse_cm,
            "keyframes": len(agent.local.keyframes),
            "walls": len(agent.local.wall_nodes),
            "rooms": len(agent.local.rooms),
        })
    agg = aggregate_ate(traj_pairs)
    agg_odo = aggregate_ate(odo_pairs)

    origin_errors = []
    for agent in agents:
        for other in agents:
            if other.id == agent.id:
                continue
            entry = {"observer": agent.id, "peer": other.id,
                     "established": agent.collab.stage(other.id) == "collaborative"}
            if entry["established"]:
                gt_rel = gts[agent.id][0].inverse().compose(gts[other.id][0])
                est = agent.collab.origin_estimate(other.id)
                t_err, r_err = pose_error(est, gt_rel)
                entry["trans_m"] = t_err
                entry["rot_deg"] = float(np.rad2deg(r_err))
            origin_errors.append(entry)

    # merged map in the world frame, gauged by robot 0's trajectory alignment
    ref = agents[0]
    ate0 = compute_ate(ref.local.trajectory(),
                       gts[0])  # agent frame -> world frame alignment
    gauge = Pose.from_matrix(
        np.block([[ate0.rotation, ate0.translation[:, None]], [np.zeros((1, 3)), 1.0]]))
    est_parts = [ref.merged_cloud_points()]
    for other in agents[1:]:
        if ref.collab.stage(other.id) != "collaborative":
            continue
        origin = ref.collab.origin_estimate(other.id)
        est_parts.append(origin.apply(other.merged_cloud_points()))
    est_cloud = np.concatenate([p for p in est_parts if len(p)], axis=0)
    est_cloud = voxel_downsample_points(est_cloud, 0.05)
    map_rmse = compute_map_rmse(est_cloud, world.gt_cloud, transform=gauge)

    match_totals = {"candidates": 0, "accepted": 0, "rejected": 0}
    for agent in agents:
        for k in match_totals:
            match_totals[k] += agent.match_stats[k]

    report = RunReport(
        scenario=scenario.name,
        mode=mode.name,
        seed=seed,
        accounting=accounting,
        robots=robots,
        aggregate_ate_cm=agg,
        odometry_ate_cm=agg_odo,
        map_rmse_cm=map_rmse,
        origin_errors=origin_errors,
        matches=match_totals,
        bytes={**channel.stats.bytes_by_type(),
               "total": channel.stats.total_bytes,
               "total_mb": channel.stats.total_bytes / 1e6},
        messages=channel.stats.messages_by_type(),
        final_cost=final_cost,
        timings={
            "total_s": time.perf_counter() - t_start,
            "final_optimize_s": t_final,
            **{f"{k}_s": sum(a.timers[k] for a in agents) for k in
               ("sense", "optimize", "registration")},
        },
    )

    if out_dir is not None:
        write_artifacts(Path(out_dir), report, agents, gts, world, channel,
                        gauge, est_cloud, figures)
    return report


def write_artifacts(out: Path, report: RunReport, agents, gts, world: World,
                    channel: Channel, gauge: Pose, est_cloud: np.ndarray,
                    figures: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())

    lines = ["sender,message_type,count,bytes"]
    from .comms import MSG_NAMES

    for (sender, mtype), (count, nbytes) in sorted(channel.stats.counts.items()):
        lines.append(f"{sender},{MSG_NAMES[mtype]},{count},{nbytes}")
    (out / "stats.csv").write_text("\n".join(lines) + "\n")

    for agent in agents:
        gt_agent = [gts[agent.id][0].inverse().compose(p) for p in gts[agent.id]]
        rows = ["index,est_x,est_y,est_z,est_qx,est_qy,est_qz,est_qw,"
                "gt_x,gt_y,gt_z,gt_qx,gt_qy,gt_qz,gt_qw"]
        for i, (est, gt) in enumerate(zip(agent.local.trajectory(), gt_agent)):
            vals = [i, *est.t, *est.q, *gt.t, *gt.q]
            rows.append(",".join(repr(v) if isinstance(v, float) else str(v)
                                 for v in np.asarray(vals, dtype=object)))
        (out / f"trajectory_{agent.id}.csv").write_text("\n".join(rows) + "\n")

        pts = voxel_downsample_points(agent.merged_cloud_points(), 0.05)
        np.savetxt(out / f"map_{agent.id}.xyz", pts, fmt="%.4f")

        (out / f"graph_{agent.id}.json").write_text(
            json.dumps(_graph_dump(agent), sort_keys=True, indent=1))

    if figures:
        from . import plots

        plots.render_run_figures(out, agents, gts, world, channel, gauge,
                                 est_cloud)


def _graph_dump(agent: Agent) -> dict:
    """Layered node/factor dump for external plotting."""
    g = agent.local.graph
    layers: dict[str, list] = {k: [] for k in
                               ("keyframe", "wall", "room", "floor", "origin")}
    for nid, node in g.nodes.items():
        st = node.state
        if nid.kind in ("keyframe", "origin"):
            state = [*st.t, *st.q]
        elif nid.kind == "wall":
            state = [*st.normal, st.offset]
        else:
            state = list(np.asarray(st, dtype=float))
        layers[nid.kind].append({
            "owner": nid.owner, "index": nid.index, "fixed": node.fixed,
            "state": [float(x) for x in state],
        })
    factors = [
        {"kind": f.kind,
         "nodes": [[n.owner, n.kind, n.index] for n in f.nodes]}
        for f in g.factors
    ]
    return {"agent": agent.id, "layers": layers, "factors": factors}
