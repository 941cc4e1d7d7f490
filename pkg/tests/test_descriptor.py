import numpy as np
import pytest

from collabslam.descriptor import (
    AlignConfig,
    AlignmentRejectedError,
    ConfigMismatchError,
    DescriptorConfig,
    EmptyRoomCloudError,
    RoomFrame,
    build_room_cloud,
    fine_align,
    make_descriptor,
    match_rooms,
    sc_distance,
    sc_matrix_distance,
    scan_context_matrix,
    shift_to_yaw,
)
from collabslam.geometry import Pose, wrap_angle

from helpers import make_room_cloud, rotate_z

CFG = DescriptorConfig()


class TestScanContext:
    def test_empty_cloud_all_zero(self):
        mat = scan_context_matrix(np.zeros((0, 3)), 60, 20, 10.0)
        assert mat.shape == (60, 20)
        assert np.all(mat == 0)

    def test_single_point_binning(self):
        # rho = L/2 at angle 0, z = 1.7 -> exactly one cell at (n_s/2, n_r/2)
        mat = scan_context_matrix(np.array([[5.0, 0.0, 1.7]]), 60, 20, 10.0)
        nz = np.argwhere(mat > 0)
        assert nz.shape == (1, 2)
        assert tuple(nz[0]) == (30, 10)
        assert abs(mat[30, 10] - 1.7) < 1e-6

    def test_points_beyond_radius_dropped(self):
        mat = scan_context_matrix(np.array([[10.0, 0.0, 1.0], [12.0, 0, 1.0]]), 60, 20, 10.0)
        assert np.all(mat == 0)

    def test_exact_sector_rotation_is_column_shift(self):
        rng = np.random.default_rng(0)
        # generic pre-rotation keeps points off exact bin boundaries
        cloud = rotate_z(make_room_cloud(rng), 0.1234)
        a = scan_context_matrix(cloud, 60, 20, 10.0)
        b = scan_context_matrix(rotate_z(cloud, 2 * np.pi / 60), 60, 20, 10.0)
        np.testing.assert_allclose(b, np.roll(a, 1, axis=0), atol=1e-6)


class TestScDistance:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(1)
        d = make_descriptor(make_room_cloud(rng), CFG)
        dist, shift = sc_distance(d, d)
        assert dist < 1e-12
        assert shift == 0

    def test_rolled_matrix_shift(self):
        rng = np.random.default_rng(2)
        A = make_descriptor(make_room_cloud(rng), CFG).matrix
        for k in (1, 7, 33):
            dist, shift = sc_matrix_distance(A, np.roll(A, k, axis=0))
            assert dist < 1e-9
            assert shift == (-k) % 60

    def test_exact_sector_rotation_distance_zero(self):
        from collabslam.geometry import voxel_downsample_points

        rng = np.random.default_rng(3)
        cloud = rotate_z(make_room_cloud(rng), 0.1234)
        # binning-level symmetry is exact on the downsampled cloud
        ds = voxel_downsample_points(cloud, CFG.voxel)
        tiny = DescriptorConfig(voxel=1e-3)
        a = make_descriptor(ds, tiny)
        k = 9
        b = make_descriptor(rotate_z(ds, k * 2 * np.pi / 60), tiny)
        dist, shift = sc_distance(a, b)
        assert dist < 1e-12
        # the yaw seed maps b's cloud back onto a's
        assert abs(wrap_angle(shift_to_yaw(shift, 60) + k * 2 * np.pi / 60)) < 1e-9
        # with re-voxelization the residual stays small
        a2 = make_descriptor(cloud, CFG)
        b2 = make_descriptor(rotate_z(cloud, k * 2 * np.pi / 60), CFG)
        assert sc_distance(a2, b2)[0] < 0.02

    def test_random_yaw_near_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            cloud = make_room_cloud(rng)
            a = make_descriptor(cloud, CFG)
            theta = rng.uniform(-np.pi, np.pi)
            b = make_descriptor(rotate_z(cloud, theta), CFG)
            dist, _ = sc_distance(a, b)
            assert dist <= 0.05

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a = make_descriptor(make_room_cloud(rng), CFG)
        b = make_descriptor(make_room_cloud(rng), CFG)
        dab, _ = sc_distance(a, b)
        dba, _ = sc_distance(b, a)
        assert abs(dab - dba) < 1e-12

    def test_distinct_clutter_separates(self):
        rng = np.random.default_rng(6)
        a = make_descriptor(make_room_cloud(rng), CFG)
        b = make_descriptor(make_room_cloud(rng), CFG)
        dist, _ = sc_distance(a, b)
        assert dist > 0.05  # same shell, different clutter

    def test_config_mismatch(self):
        rng = np.random.default_rng(7)
        a = make_descriptor(make_room_cloud(rng), CFG)
        b = make_descriptor(make_room_cloud(rng), DescriptorConfig(n_rings=10))
        with pytest.raises(ConfigMismatchError):
            sc_distance(a, b)


class TestMatchRooms:
    def test_no_peers_empty(self):
        rng = np.random.default_rng(8)
        local = make_descriptor(make_room_cloud(rng), CFG, owner=0, room_index=0)
        assert match_rooms([local], {}, 0.35) == []

    def test_same_room_matches_distinct_rejected(self):
        rng = np.random.default_rng(9)
        cloud = make_room_cloud(rng)
        local = make_descriptor(cloud, CFG, owner=0, room_index=0)
        same = make_descriptor(
            rotate_z(cloud + rng.normal(0, 0.02, cloud.shape), 0.4), CFG,
            owner=1, room_index=5)
        other = make_descriptor(make_room_cloud(rng, width=4.4, depth=5.2),
                                CFG, owner=1, room_index=6)
        store = {(1, 5): same, (1, 6): other}
        got = match_rooms([local], store, 0.35)
        assert [(c.peer, c.peer_room) for c in got] == [(1, 5)]

    def test_excluded_pairs_skipped(self):
        rng = np.random.default_rng(10)
        cloud = make_room_cloud(rng)
        local = make_descriptor(cloud, CFG, owner=0, room_index=0)
        peer = make_descriptor(cloud, CFG, owner=1, room_index=2)
        got = match_rooms([local], {(1, 2): peer}, 0.35, exclude={(0, 1, 2)})
        assert got == []


class TestFineAlign:
    def test_identity_self_alignment(self):
        rng = np.random.default_rng(11)
        cloud = make_room_cloud(rng)
        pose, fitness = fine_align(cloud, cloud, 0.0)
        assert np.linalg.norm(pose.t) < 1e-6
        assert abs(pose.yaw) < 1e-6
        assert fitness < 1e-6

    def test_recovers_constructed_transform(self):
        rng = np.random.default_rng(12)
        cloud = make_room_cloud(rng)
        yaw = np.deg2rad(20.0)
        t = np.array([0.3, -0.2, 0.0])
        moved = rotate_z(cloud, yaw) + t
        # seed at the nearest sector multiple of the inverse yaw
        sector = 2 * np.pi / 60
        seed = np.round(-yaw / sector) * sector
        pose, fitness = fine_align(cloud, moved, seed)
        # the recovered transform must map 'moved' back onto 'cloud'
        expect = Pose.from_xyz_yaw(*t[:2], 0, yaw).inverse()
        assert np.linalg.norm(pose.t[:2] - expect.t[:2]) < 0.02
        assert abs(wrap_angle(pose.yaw - expect.yaw)) < np.deg2rad(0.5)
        assert fitness < 0.02

    def test_recovery_sweep(self):
        rng = np.random.default_rng(13)
        sector = 2 * np.pi / 60
        for _ in range(8):
            cloud = make_room_cloud(rng, n_clutter=4)
            yaw = rng.uniform(-np.pi / 6, np.pi / 6)
            t = np.array([*rng.uniform(-0.5, 0.5, 2), 0.0])
            moved = rotate_z(cloud, yaw) + t
            seed = np.round(-yaw / sector) * sector
            pose, _ = fine_align(cloud, moved, seed)
            expect = Pose.from_xyz_yaw(*t[:2], 0, yaw).inverse()
            assert np.linalg.norm(pose.t[:2] - expect.t[:2]) < 0.02
            assert abs(wrap_angle(pose.yaw - expect.yaw)) < np.deg2rad(0.5)

    def test_cross_room_rejected(self):
        rng = np.random.default_rng(14)
        a = make_room_cloud(rng)
        b = make_room_cloud(rng)  # same shell, different clutter
        with pytest.raises(AlignmentRejectedError) as exc:
            fine_align(a, b, 0.0)
        assert exc.value.fitness > 0.07

    def test_empty_cloud_raises(self):
        rng = np.random.default_rng(15)
        cloud = make_room_cloud(rng)
        with pytest.raises(EmptyRoomCloudError):
            fine_align(cloud, np.zeros((0, 3)), 0.0)


class TestRoomCloudAssembly:
    def test_single_keyframe_at_center(self):
        rng = np.random.default_rng(16)
        scan = rng.uniform(-2, 2, (100, 3)) + np.array([0, 0, 1.0])
        frame = RoomFrame([0.0, 0.0], 0.0)
        out = build_room_cloud(frame, (6.0, 8.0), [(Pose.identity(), scan)])
        np.testing.assert_allclose(out, scan, atol=1e-12)

    def test_cropping_and_empty(self):
        frame = RoomFrame([0.0, 0.0], 0.0)
        far = np.array([[50.0, 0.0, 1.0]])
        with pytest.raises(EmptyRoomCloudError):
            build_room_cloud(frame, (4.0, 4.0), [(Pose.identity(), far)])

    def test_determinism(self):
        rng = np.random.default_rng(17)
        scan = rng.uniform(-3, 3, (200, 3))
        frame = RoomFrame([1.0, 2.0], 0.3)
        pose = Pose.from_xyz_yaw(0.5, 0.5, 0.0, 0.2)
        a = build_room_cloud(frame, (6.0, 8.0), [(pose, scan)])
        b = build_room_cloud(frame, (6.0, 8.0), [(pose, scan)])
        np.testing.assert_array_equal(a, b)

    def test_two_keyframes_same_wall_overlay(self):
        # two viewpoints of the same wall produce overlapping room points
        wall_pts = np.column_stack([
            np.full(50, 3.0), np.linspace(-2, 2, 50), np.full(50, 1.0)])
        p1 = Pose.from_xyz_yaw(0.0, 0.0)
        p2 = Pose.from_xyz_yaw(1.0, 0.5, 0.0, 0.3)
        scan1 = p1.inverse().apply(wall_pts)
        scan2 = p2.inverse().apply(wall_pts)
        frame = RoomFrame([0.0, 0.0], 0.0)
        out = build_room_cloud(frame, (8.0, 8.0), [(p1, scan1), (p2, scan2)])
        a, b = out[:50], out[50:]
        from scipy.spatial import cKDTree
        d, _ = cKDTree(a).query(b)
        assert np.max(d) < 1e-9
