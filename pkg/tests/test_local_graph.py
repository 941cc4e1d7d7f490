import numpy as np
import pytest

from collabslam.geometry import Plane, PointCloud, Pose, make_plane
from collabslam.local_graph import FrontEndConfig, LocalGraph
from collabslam.world import (
    ClutterSpec,
    RoomSpec,
    SensorModel,
    TrajectorySpec,
    WorldSpec,
    generate_trajectory,
    generate_world,
)

from helpers import drive_local_graph, gt_in_agent_frame, trajectory_rmse

EMPTY = PointCloud(np.zeros((0, 3)))
COV = np.diag([0.005**2, 0.005**2, 0.005**2])


def obs(n, d):
    return (make_plane(n, d, COV), COV)


def box_observations(x0, x1, y0, y1, at):
    """Zero-noise body-frame planes of an axis-aligned box seen from `at`
    (identity-yaw pose)."""
    planes = [
        make_plane([1, 0, 0], -x0), make_plane([-1, 0, 0], x1),
        make_plane([0, 1, 0], -y0), make_plane([0, -1, 0], y1),
    ]
    pose = Pose.from_xyz_yaw(*at)
    from collabslam.geometry import transform_plane

    return [(transform_plane(pose.inverse(), p), COV) for p in planes]


def box_scan(x0, x1, y0, y1, at):
    """Body-frame wall points of the box as seen from `at` (identity yaw)."""
    pts = []
    for x in (x0, x1):
        ys = np.linspace(y0, y1, 25)
        pts.append(np.column_stack([np.full(25, x), ys, np.full(25, 1.0)]))
    for y in (y0, y1):
        xs = np.linspace(x0, x1, 25)
        pts.append(np.column_stack([xs, np.full(25, y), np.full(25, 1.0)]))
    pose = Pose.from_xyz_yaw(*at)
    return PointCloud(pose.inverse().apply(np.concatenate(pts)))


class TestInsertKeyframe:
    def test_first_keyframe_is_gauge(self):
        lg = LocalGraph(0)
        node = lg.insert_keyframe(None, EMPTY, [])
        assert lg.graph.nodes[node].fixed
        np.testing.assert_allclose(lg.graph.state(node).t, np.zeros(3))

    def test_new_room_creates_walls_and_factors(self):
        lg = LocalGraph(0)
        lg.insert_keyframe(None, EMPTY, box_observations(0, 4, 0, 6, (2, 3, 0)))
        assert len(lg.wall_nodes) == 4
        kinds = [f.kind for f in lg.graph.factors]
        assert kinds.count("pose_plane") == 4

    def test_reobservation_reuses_walls(self):
        lg = LocalGraph(0)
        lg.insert_keyframe(None, EMPTY, box_observations(0, 4, 0, 6, (2, 3, 0)))
        lg.insert_keyframe(Pose.from_xyz_yaw(0.5, 0, 0), EMPTY,
                           box_observations(0, 4, 0, 6, (2.5, 3, 0)))
        assert len(lg.wall_nodes) == 4
        assert sum(f.kind == "pose_plane" for f in lg.graph.factors) == 8


class TestAssociatePlane:
    def setup_method(self):
        self.lg = LocalGraph(0)
        self.lg.insert_keyframe(None, EMPTY, [obs([1, 0, 0], -2.0)])

    def test_exact_duplicate_hits(self):
        wall = self.lg.wall_nodes[0]
        assert self.lg.associate_plane(make_plane([1, 0, 0], -2.0)) == wall

    def test_perpendicular_misses(self):
        assert self.lg.associate_plane(make_plane([0, 1, 0], -2.0)) is None

    def test_far_offset_misses(self):
        assert self.lg.associate_plane(make_plane([1, 0, 0], -2.5)) is None

    def test_nearest_offset_wins(self):
        lg = LocalGraph(0)
        lg.insert_keyframe(None, EMPTY,
                           [obs([1, 0, 0], -2.0), obs([1, 0, 0], -2.45)])
        assert len(lg.wall_nodes) == 2
        got = lg.associate_plane(make_plane([1, 0, 0], -2.1))
        angle_match = lg.wall_nodes[0]
        assert got == angle_match  # offset gaps 0.1 vs 0.35


class TestDetectRooms:
    def test_full_box_detected_with_center(self):
        lg = LocalGraph(0)
        lg.insert_keyframe(None, box_scan(-2, 2, -3, 3, (0, 0, 0)),
                           box_observations(-2, 2, -3, 3, (0, 0, 0)))
        rooms = lg.detect_rooms()
        assert len(rooms) == 1
        np.testing.assert_allclose(lg.graph.state(rooms[0].node), [0, 0], atol=1e-9)
        np.testing.assert_allclose(sorted(rooms[0].extents), [4, 6], atol=1e-9)
        assert rooms[0].members == [lg.keyframes[0].node]

    def test_three_walls_no_room(self):
        lg = LocalGraph(0)
        planes = box_observations(-2, 2, -3, 3, (0, 0, 0))[:3]
        lg.insert_keyframe(None, box_scan(-2, 2, -3, 3, (0, 0, 0)), planes)
        assert lg.detect_rooms() == []

    def test_reentry_idempotent(self):
        lg = LocalGraph(0)
        lg.insert_keyframe(None, box_scan(-2, 2, -3, 3, (0, 0, 0)),
                           box_observations(-2, 2, -3, 3, (0, 0, 0)))
        assert len(lg.detect_rooms()) == 1
        lg.insert_keyframe(Pose.from_xyz_yaw(0.4, 0, 0), box_scan(-2, 2, -3, 3, (0.4, 0, 0)),
                           box_observations(-2, 2, -3, 3, (0.4, 0, 0)))
        assert lg.detect_rooms() == []
        assert len(lg.rooms) == 1

    def test_narrow_corridor_not_a_room(self):
        lg = LocalGraph(0)
        lg.insert_keyframe(None, box_scan(-0.6, 0.6, -4, 4, (0, 0, 0)),
                           box_observations(-0.6, 0.6, -4, 4, (0, 0, 0)))
        assert lg.detect_rooms() == []


class TestFloor:
    def test_floor_tracks_room_means(self):
        lg = LocalGraph(0)
        lg.update_floor()
        assert lg.floor_node is None
        # map frame anchored at the first keyframe; rooms appear at (2,3), (6,3)
        lg.insert_keyframe(None, EMPTY, [])
        lg.insert_keyframe(Pose.from_xyz_yaw(2, 3, 0), box_scan(0, 4, 0, 6, (2, 3, 0)),
                           box_observations(0, 4, 0, 6, (2, 3, 0)))
        lg.detect_rooms()
        lg.update_floor()
        np.testing.assert_allclose(lg.graph.state(lg.floor_node), [2, 3, 0], atol=1e-9)
        assert lg.graph.nodes[lg.floor_node].fixed
        lg.insert_keyframe(Pose.from_xyz_yaw(4, 0, 0), box_scan(4, 8, 0, 6, (6, 3, 0)),
                           box_observations(4, 8, 0, 6, (6, 3, 0)))
        lg.detect_rooms()
        lg.update_floor()
        np.testing.assert_allclose(lg.graph.state(lg.floor_node), [4, 3, 0], atol=1e-9)


def small_world(clutter=0):
    return generate_world(
        WorldSpec(rooms=[RoomSpec((0.0, 4.0), (0.0, 6.0))],
                  clutter=ClutterSpec(per_room=clutter)),
        seed=0,
    )


class TestSimulatedRuns:
    def _loop_poses(self, sensor, spacing=0.5):
        tspec = TrajectorySpec(
            np.array([[1.0, 1.0], [3.0, 1.0], [3.0, 5.0], [1.0, 5.0], [1.0, 1.2]]),
            keyframe_spacing=spacing,
        )
        return generate_trajectory(tspec, sensor)

    def test_zero_noise_matches_ground_truth(self):
        sensor = SensorModel(horizontal_rays=120, rings=4, range_sigma=0.0,
                             plane_normal_sigma=0.0, plane_offset_sigma=0.0,
                             odom_trans_sigma=0.0, odom_yaw_sigma=0.0)
        world = small_world()
        poses = self._loop_poses(sensor)
        lg = drive_local_graph(world, poses, sensor, np.random.default_rng(0))
        gt = gt_in_agent_frame(poses)
        for est, g in zip(lg.trajectory(), gt):
            assert np.linalg.norm(est.t - g.t) < 1e-6
        assert lg.graph.total_cost() < 1e-12
        # no wall duplicated at zero noise
        assert len(lg.wall_nodes) == 4
        assert len(lg.rooms) == 1

    def test_noisy_loop_beats_dead_reckoning(self):
        sensor = SensorModel(horizontal_rays=90, rings=4,
                             odom_trans_sigma=0.03, odom_yaw_sigma=0.02)
        world = small_world()
        wins = 0
        for seed in range(5):
            poses = self._loop_poses(sensor)
            lg = drive_local_graph(world, poses, sensor,
                                   np.random.default_rng(seed))
            gt = gt_in_agent_frame(poses)
            est_rmse = trajectory_rmse(lg.trajectory(), gt)
            dead_rmse = trajectory_rmse(lg.dead_reckoning(), gt)
            if est_rmse < dead_rmse:
                wins += 1
        assert wins >= 4

    def test_layer_integrity(self):
        sensor = SensorModel(horizontal_rays=90, rings=4)
        world = small_world()
        poses = self._loop_poses(sensor)
        lg = drive_local_graph(world, poses, sensor, np.random.default_rng(1))
        wall_factored = {n for f in lg.graph.factors if f.kind == "pose_plane"
                         for n in f.nodes if n.kind == "wall"}
        assert set(lg.wall_nodes) == wall_factored
        room_factors = [f for f in lg.graph.factors if f.kind == "room_wall"]
        assert len(room_factors) == len(lg.rooms)
        for f, room in zip(room_factors, lg.rooms):
            assert f.nodes[0] == room.node
            assert all(n.kind == "wall" for n in f.nodes[1:])
        assert (lg.floor_node is not None) == (len(lg.rooms) >= 1)

    def test_membership_positions_inside(self):
        sensor = SensorModel(horizontal_rays=90, rings=4)
        world = small_world()
        poses = self._loop_poses(sensor)
        lg = drive_local_graph(world, poses, sensor, np.random.default_rng(2))
        assert len(lg.rooms) == 1
        record = lg.rooms[0]
        assert len(record.members) > 5
        for node in record.members:
            assert lg._inside_room(record, lg.graph.state(node).t)

    def test_odometry_only_equals_dead_reckoning(self):
        sensor = SensorModel(odom_trans_sigma=0.02, odom_yaw_sigma=0.01)
        rng = np.random.default_rng(3)
        lg = LocalGraph(0)
        lg.insert_keyframe(None, EMPTY, [])
        pose = Pose.identity()
        for _ in range(10):
            step = Pose.from_xyz_yaw(0.5 + rng.normal(0, 0.02),
                                     rng.normal(0, 0.02), 0, rng.normal(0, 0.01))
            lg.insert_keyframe(step, EMPTY, [], odom_sigmas=(0.02, 0.01))
        lg.optimize()
        for est, dead in zip(lg.trajectory(), lg.dead_reckoning()):
            assert np.linalg.norm(est.t - dead.t) < 1e-8
