import numpy as np
import pytest

from collabslam.collab import MODES, CollabGraph, StaleMessageError, WallPairingError
from collabslam.descriptor import (
    DescriptorConfig,
    RoomMatch,
    build_room_cloud,
    fine_align,
    make_descriptor,
    sc_distance,
    shift_to_yaw,
)
from collabslam.distill import distill
from collabslam.geometry import Plane, Pose, pose_error, quat_from_yaw
from collabslam.world import (
    ClutterSpec,
    RoomSpec,
    SensorModel,
    TrajectorySpec,
    WorldSpec,
    generate_trajectory,
    generate_world,
)

from helpers import drive_local_graph

DESC_CFG = DescriptorConfig()


def shared_room_world(seed=0):
    spec = WorldSpec(rooms=[RoomSpec((0.0, 5.0), (0.0, 6.0))],
                     clutter=ClutterSpec(per_room=3, size=(0.5, 0.9),
                                         path_clearance=0.15),
                     keepout_paths=[np.array(loop_a()), np.array(loop_b())])
    return generate_world(spec, seed=seed)


def loop_a():
    return [[1.0, 1.0], [4.0, 1.0], [4.0, 5.0], [1.0, 5.0], [1.0, 1.2]]


def loop_b():
    return [[4.0, 5.0], [1.0, 5.0], [1.0, 1.0], [4.0, 1.0], [4.0, 4.8]]


def sensors(noise: bool):
    if noise:
        return SensorModel(horizontal_rays=180, rings=8)
    return SensorModel(horizontal_rays=180, rings=8, range_sigma=0.0,
                       plane_normal_sigma=0.0, plane_offset_sigma=0.0,
                       odom_trans_sigma=0.0, odom_yaw_sigma=0.0)


def drive_pair(noise: bool, seed=0):
    sensor = sensors(noise)
    world = shared_room_world(seed)
    poses_a = generate_trajectory(TrajectorySpec(np.array(loop_a()), keyframe_spacing=0.5), sensor)
    poses_b = generate_trajectory(TrajectorySpec(np.array(loop_b()), keyframe_spacing=0.5), sensor)
    ss = np.random.SeedSequence(seed)
    rng_a, rng_b = [np.random.default_rng(s) for s in ss.spawn(2)]
    lg_a = drive_local_graph(world, poses_a, sensor, rng_a, agent=0)
    lg_b = drive_local_graph(world, poses_b, sensor, rng_b, agent=1)
    gt_origin = poses_a[0].inverse().compose(poses_b[0])
    return world, lg_a, lg_b, gt_origin


def room_cloud(lg, record):
    return build_room_cloud(record.frame, record.extents, lg.member_scans(record))


def make_match(lg_a, lg_b, mode):
    rec_a, rec_b = lg_a.rooms[0], lg_b.rooms[0]
    cloud_a, cloud_b = room_cloud(lg_a, rec_a), room_cloud(lg_b, rec_b)
    desc_a = make_descriptor(cloud_a, DESC_CFG)
    desc_b = make_descriptor(cloud_b, DESC_CFG)
    dist, shift = sc_distance(desc_a, desc_b)
    seed = shift_to_yaw(shift, DESC_CFG.n_sectors)
    alignment, fitness = (None, None)
    if MODES[mode].fine_alignment:
        alignment, fitness = fine_align(cloud_a, cloud_b, seed)
    return RoomMatch(rec_a.index, 1, rec_b.index, dist, seed, alignment, fitness)


class TestIntegrateDistilled:
    def test_first_snapshot_isolated(self):
        _, lg_a, lg_b, _ = drive_pair(noise=False)
        cg = CollabGraph(lg_a)
        before = len(lg_a.graph.factors)
        cg.integrate_distilled(distill(lg_b, seq=0))
        assert cg.stage(1) == "isolated"
        peer = cg.peers[1]
        assert len(peer.walls) == 4 and len(peer.rooms) == 1
        # anchoring priors + imported room-wall factor
        added = len(lg_a.graph.factors) - before
        assert added == 4 + 1
        # the origin node exists but is untouched by any factor
        assert all(peer.origin not in f.nodes for f in lg_a.graph.factors)

    def test_update_preserves_ids(self):
        _, lg_a, lg_b, _ = drive_pair(noise=False)
        cg = CollabGraph(lg_a)
        cg.integrate_distilled(distill(lg_b, seq=0))
        ids_before = dict(cg.peers[1].walls)
        cg.integrate_distilled(distill(lg_b, seq=1))
        assert cg.peers[1].walls == ids_before
        # priors were replaced, not duplicated
        priors = [f for f in lg_a.graph.factors if f.kind == "prior"]
        assert len(priors) == 4

    def test_stale_rejected(self):
        _, lg_a, lg_b, _ = drive_pair(noise=False)
        cg = CollabGraph(lg_a)
        cg.integrate_distilled(distill(lg_b, seq=5))
        n = len(lg_a.graph.factors)
        with pytest.raises(StaleMessageError):
            cg.integrate_distilled(distill(lg_b, seq=5))
        assert len(lg_a.graph.factors) == n


class TestAddMatchFactors:
    def test_rooms_mode_single_factor(self):
        _, lg_a, lg_b, _ = drive_pair(noise=False)
        cg = CollabGraph(lg_a)
        cg.integrate_distilled(distill(lg_b, seq=0))
        match = make_match(lg_a, lg_b, "rooms")
        rec = cg.add_match_factors(match, MODES["rooms"], lg_a.rooms[0],
                                   lg_b.rooms[0].frame.yaw)
        assert [f.kind for f in rec.factors] == ["room_match"]
        assert cg.stage(1) == "collaborative"

    def test_full_mode_adds_wall_factors(self):
        _, lg_a, lg_b, _ = drive_pair(noise=False)
        cg = CollabGraph(lg_a)
        cg.integrate_distilled(distill(lg_b, seq=0))
        match = make_match(lg_a, lg_b, "full")
        rec = cg.add_match_factors(match, MODES["full"], lg_a.rooms[0],
                                   lg_b.rooms[0].frame.yaw)
        kinds = [f.kind for f in rec.factors]
        assert kinds == ["room_match"] + ["wall_match"] * 4
        assert len(rec.wall_pairs) == 4
        for f in rec.factors:
            origins = [n for n in f.nodes if n.kind == "origin"]
            assert len(origins) == 1

    def test_degenerate_pairing_falls_back(self):
        _, lg_a, lg_b, _ = drive_pair(noise=False)
        cg = CollabGraph(lg_a)
        cg.integrate_distilled(distill(lg_b, seq=0))
        # corrupt the imported wall normals so nothing pairs within 15 deg
        rot = Pose(quat_from_yaw(np.pi / 4), np.zeros(3))
        from collabslam.geometry import transform_plane

        for node in cg.peers[1].walls.values():
            cg.graph.set_state(node, transform_plane(rot, cg.graph.state(node)))
        match = make_match(lg_a, lg_b, "rooms_walls")
        rec = cg.add_match_factors(match, MODES["rooms_walls"], lg_a.rooms[0],
                                   lg_b.rooms[0].frame.yaw)
        assert rec.wall_pairing_failed
        assert [f.kind for f in rec.factors] == ["room_match"]


class TestJointOptimization:
    def run_mode(self, mode, noise, seed=0):
        _, lg_a, lg_b, gt_origin = drive_pair(noise=noise, seed=seed)
        cg = CollabGraph(lg_a)
        cg.integrate_distilled(distill(lg_b, seq=0))
        match = make_match(lg_a, lg_b, mode)
        cg.add_match_factors(match, MODES[mode], lg_a.rooms[0],
                             lg_b.rooms[0].frame.yaw)
        res = cg.optimize_collaborative()
        return cg, res, gt_origin

    def test_zero_noise_origin_recovery(self):
        cg, res, gt_origin = self.run_mode("rooms_walls", noise=False)
        t_err, r_err = pose_error(cg.origin_estimate(1), gt_origin)
        assert t_err < 1e-6
        assert r_err < 1e-6
        assert res.final_cost < 1e-10

    def test_noisy_origin_recovery_full(self):
        errs = []
        for seed in range(3):
            cg, _, gt_origin = self.run_mode("full", noise=True, seed=seed)
            errs.append(pose_error(cg.origin_estimate(1), gt_origin))
        assert np.median([e[0] for e in errs]) < 0.10
        assert np.median([e[1] for e in errs]) < np.deg2rad(1.0)

    def test_optimize_requires_collaboration(self):
        _, lg_a, lg_b, _ = drive_pair(noise=False)
        cg = CollabGraph(lg_a)
        cg.integrate_distilled(distill(lg_b, seq=0))
        with pytest.raises(RuntimeError):
            cg.optimize_collaborative()

    def test_symmetric_convergence_zero_noise(self):
        _, lg_a, lg_b, gt = drive_pair(noise=False)
        cg_a, cg_b = CollabGraph(lg_a), CollabGraph(lg_b)
        cg_a.integrate_distilled(distill(lg_b, seq=0))
        cg_b.integrate_distilled(distill(lg_a, seq=0))
        m_ab = make_match(lg_a, lg_b, "rooms_walls")
        cg_a.add_match_factors(m_ab, MODES["rooms_walls"], lg_a.rooms[0],
                               lg_b.rooms[0].frame.yaw)
        cg_a.optimize_collaborative()
        m_ba = make_match(lg_b, lg_a, "rooms_walls")
        m_ba = RoomMatch(lg_b.rooms[0].index, 0, lg_a.rooms[0].index,
                         m_ba.sc_distance, m_ba.yaw_seed)
        cg_b.add_match_factors(m_ba, MODES["rooms_walls"], lg_b.rooms[0],
                               lg_a.rooms[0].frame.yaw)
        cg_b.optimize_collaborative()
        comp = cg_a.origin_estimate(1).compose(cg_b.origin_estimate(0))
        t_err = np.linalg.norm(comp.t)
        assert t_err < 1e-5
