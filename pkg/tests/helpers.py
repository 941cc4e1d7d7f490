"""Shared synthetic fixtures for the test suite."""

import numpy as np


def sample_box_surface(center, size, pitch, rng=None, top=True):
    """Grid-sample the side faces (and optionally the top) of an upright box."""
    cx, cy, cz = center
    sx, sy, sz = size
    pts = []
    zs = np.arange(cz - sz / 2, cz + sz / 2 + pitch / 2, pitch)
    xs = np.arange(cx - sx / 2, cx + sx / 2 + pitch / 2, pitch)
    ys = np.arange(cy - sy / 2, cy + sy / 2 + pitch / 2, pitch)
    for x in (cx - sx / 2, cx + sx / 2):
        g = np.stack(np.meshgrid(ys, zs, indexing="ij"), -1).reshape(-1, 2)
        pts.append(np.column_stack([np.full(len(g), x), g[:, 0], g[:, 1]]))
    for y in (cy - sy / 2, cy + sy / 2):
        g = np.stack(np.meshgrid(xs, zs, indexing="ij"), -1).reshape(-1, 2)
        pts.append(np.column_stack([g[:, 0], np.full(len(g), y), g[:, 1]]))
    if top:
        g = np.stack(np.meshgrid(xs, ys, indexing="ij"), -1).reshape(-1, 2)
        pts.append(np.column_stack([g[:, 0], g[:, 1], np.full(len(g), cz + sz / 2)]))
    return np.concatenate(pts, axis=0)


def make_room_cloud(rng, width=5.4, depth=6.2, height=3.0, n_clutter=3,
                    pitch=0.06, floor=True, jitter=0.012,
                    clutter_size=(1.0, 2.0), clutter_height=(1.2, 2.8)):
    """Synthetic room-centric cloud: four walls, floor, and random clutter.

    The small jitter keeps surface samples off lattice positions, as real
    ray hits are.
    """
    pts = []
    zs = np.arange(0.0, height + pitch / 2, pitch)
    xs = np.arange(-width / 2, width / 2 + pitch / 2, pitch)
    ys = np.arange(-depth / 2, depth / 2 + pitch / 2, pitch)
    for x in (-width / 2, width / 2):
        g = np.stack(np.meshgrid(ys, zs, indexing="ij"), -1).reshape(-1, 2)
        pts.append(np.column_stack([np.full(len(g), x), g[:, 0], g[:, 1]]))
    for y in (-depth / 2, depth / 2):
        g = np.stack(np.meshgrid(xs, zs, indexing="ij"), -1).reshape(-1, 2)
        pts.append(np.column_stack([g[:, 0], np.full(len(g), y), g[:, 1]]))
    if floor:
        g = np.stack(np.meshgrid(xs, ys, indexing="ij"), -1).reshape(-1, 2)
        pts.append(np.column_stack([g[:, 0], g[:, 1], np.zeros(len(g))]))
    for _ in range(n_clutter):
        size = rng.uniform([clutter_size[0], clutter_size[0], clutter_height[0]],
                           [clutter_size[1], clutter_size[1], clutter_height[1]])
        cx = rng.uniform(-width / 2 + 0.3 + size[0] / 2, width / 2 - 0.3 - size[0] / 2)
        cy = rng.uniform(-depth / 2 + 0.3 + size[1] / 2, depth / 2 - 0.3 - size[1] / 2)
        pts.append(sample_box_surface([cx, cy, size[2] / 2], size, pitch))
    cloud = np.concatenate(pts, axis=0)
    if jitter > 0:
        cloud = cloud + rng.normal(0.0, jitter, cloud.shape)
    return cloud


def rotate_z(points, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return np.asarray(points) @ R.T


def drive_local_graph(world, gt_poses, sensor, rng, agent=0, config=None,
                      optimize_every=1, detect=True):
    """Feed a ground-truth trajectory through sensing into a LocalGraph,
    the way the full runner does, and return the graph."""
    from collabslam.local_graph import FrontEndConfig, LocalGraph
    from collabslam.world import observe_planes, raycast_scan, step_odometry
    from collabslam.geometry import quat_to_rotvec

    cfg = config or FrontEndConfig(mount_height=sensor.mount_height)
    lg = LocalGraph(agent, cfg)
    for i, pose in enumerate(gt_poses):
        scan = raycast_scan(world, pose, sensor, rng)
        obs = observe_planes(world, pose, sensor, rng)
        if i == 0:
            lg.insert_keyframe(None, scan, obs)
        else:
            odom = step_odometry(gt_poses[i - 1], pose, sensor, rng)
            rel = gt_poses[i - 1].inverse().compose(pose)
            d = np.linalg.norm(rel.t)
            turn = np.linalg.norm(quat_to_rotvec(rel.q))
            sig = (sensor.odom_trans_sigma * np.sqrt(d),
                   sensor.odom_yaw_sigma * np.sqrt(turn))
            lg.insert_keyframe(odom, scan, obs, odom_sigmas=sig)
        if detect:
            lg.detect_rooms()
            lg.update_floor()
        if optimize_every and (i + 1) % optimize_every == 0:
            lg.optimize()
    return lg


def gt_in_agent_frame(gt_poses):
    """Ground truth expressed in the agent map frame (first pose identity)."""
    inv = gt_poses[0].inverse()
    return [inv.compose(p) for p in gt_poses]


def trajectory_rmse(est_poses, gt_poses):
    import numpy as _np

    err = _np.array([e.t - g.t for e, g in zip(est_poses, gt_poses)])
    return float(_np.sqrt(_np.mean(_np.sum(err**2, axis=1))))
