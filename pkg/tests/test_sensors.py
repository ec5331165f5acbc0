import numpy as np
import pytest

from forestsurvey import se3, sensors, world as worldmod

from conftest import single_tree_world


def _pose_at(x, y, z, yaw=0.0):
    return se3.pose_xyyaw(x, y, yaw, z=z)


def test_single_ray_hits_stem_exactly():
    w = single_tree_world(radius_13=0.15)
    lidar = sensors.LidarModel(
        vertical_fov_deg=0.1,
        channels=1,
        azimuth_res_deg=360.0,  # a single forward ray
        scan_rate_hz=10.0,
        max_range=30.0,
        range_noise_std=0.0,
        mount_height=0.0,
    )
    pose = _pose_at(5.0, 10.0, 1.3)
    scan = sensors.simulate_scan(w, pose, lidar)
    assert len(scan.points) == 1
    assert np.linalg.norm(scan.points[0]) == pytest.approx(4.85, abs=1e-9)


def test_upward_channels_in_empty_world_return_nothing(flat_empty_world):
    lidar = sensors.LidarModel(
        vertical_fov_deg=20.0,
        channels=8,
        azimuth_res_deg=360.0,  # a single forward column of rays
        scan_rate_hz=10.0,
        max_range=30.0,
        range_noise_std=0.0,
        mount_height=0.0,
    )
    pose = _pose_at(15.0, 15.0, 2.0) @ se3.make_pose(
        (0, 0, 0), se3.exp_so3((0.0, -np.deg2rad(60.0), 0.0))
    )  # pitch the column up 60 deg: every ray points skyward
    scan = sensors.simulate_scan(flat_empty_world, pose, lidar)
    assert len(scan.points) == 0


def test_wide_fov_sees_more_upper_stem():
    w = single_tree_world(radius_13=0.18, height=14.0)
    pose = _pose_at(5.0, 10.0, 0.9)
    narrow = sensors.simulate_scan(w, pose, sensors.LIDAR_PRESETS["narrow-30"])
    wide = sensors.simulate_scan(w, pose, sensors.LIDAR_PRESETS["wide-104"])

    def stem_points_above(scan, z):
        pts = scan.points_world()
        if len(pts) == 0:
            return 0
        near_axis = np.hypot(pts[:, 0] - 10.0, pts[:, 1] - 10.0) < 1.0
        return int(np.sum(near_axis & (pts[:, 2] > z)))

    assert stem_points_above(wide, 3.0) > stem_points_above(narrow, 3.0)


def test_noiseless_points_lie_on_surfaces(small_world):
    pose = _pose_at(10.0, 10.0, small_world.terrain.height_at(10.0, 10.0) + 0.9)
    lidar = sensors.LIDAR_PRESETS["wide-104"]
    noiseless = sensors.LidarModel(
        **{**lidar.__dict__, "range_noise_std": 0.0}
    )
    scan = sensors.simulate_scan(small_world, pose, noiseless)
    pts = scan.points_world()
    assert len(pts) > 100
    arrays = small_world.arrays()
    # every point must sit on terrain or on a frustum surface (<= 1 mm)
    residual = np.full(len(pts), np.inf)
    ground = small_world.terrain.height_at(pts[:, 0], pts[:, 1])
    residual = np.minimum(residual, np.abs(pts[:, 2] - ground))
    for f in range(len(arrays.fr_len)):
        w = pts - arrays.fr_base[f]
        u = w @ arrays.fr_axis[f]
        in_band = (u >= -1e-6) & (u <= arrays.fr_len[f] + 1e-6)
        perp = np.linalg.norm(
            w - u[:, None] * arrays.fr_axis[f][None, :], axis=1
        )
        r_at = arrays.fr_r0[f] + arrays.fr_k[f] * u
        res = np.where(in_band, np.abs(perp - r_at), np.inf)
        residual = np.minimum(residual, res)
    assert float(residual.max()) <= 1e-3


def test_scan_respects_max_range_and_count(small_world):
    pose = _pose_at(10.0, 10.0, small_world.terrain.height_at(10.0, 10.0) + 0.9)
    lidar = sensors.LIDAR_PRESETS["narrow-30"]
    rng = np.random.default_rng(0)
    scan = sensors.simulate_scan(small_world, pose, lidar, rng=rng)
    ranges = np.linalg.norm(scan.points, axis=1)
    assert np.all(ranges <= lidar.max_range + 1e-12)
    assert len(scan.points) <= lidar.channels * int(360.0 / lidar.azimuth_res_deg)


def test_scan_deterministic_under_fixed_rng(small_world):
    pose = _pose_at(8.0, 9.0, small_world.terrain.height_at(8.0, 9.0) + 0.9)
    lidar = sensors.LIDAR_PRESETS["wide-104"]
    a = sensors.simulate_scan(small_world, pose, lidar, rng=np.random.default_rng(7))
    b = sensors.simulate_scan(small_world, pose, lidar, rng=np.random.default_rng(7))
    assert np.array_equal(a.points, b.points)


def test_step_robot_straight_line(flat_empty_world):
    state = sensors.initial_robot_state(flat_empty_world, 5.0, 15.0)
    for _ in range(100):
        state, _ = sensors.step_robot(state, (0.6, 0.0, 0.0), 0.1, flat_empty_world)
    assert state.x == pytest.approx(11.0, abs=1e-9)
    assert state.y == pytest.approx(15.0, abs=1e-9)


def test_step_robot_pure_rotation(flat_empty_world):
    state = sensors.initial_robot_state(flat_empty_world, 15.0, 15.0)
    for _ in range(10):
        state, _ = sensors.step_robot(state, (0.0, 0.0, np.pi / 2), 0.1, flat_empty_world)
    assert state.yaw == pytest.approx(np.pi / 2, abs=1e-9)
    assert (state.x, state.y) == (15.0, 15.0)


def test_step_robot_saturates_speed(flat_empty_world):
    state = sensors.initial_robot_state(flat_empty_world, 5.0, 15.0)
    state, _ = sensors.step_robot(state, (5.0, 0.0, 0.0), 0.1, flat_empty_world)
    assert state.x - 5.0 == pytest.approx(sensors.MAX_SPEED * 0.1)


def test_step_consistency_half_steps(flat_empty_world):
    cmd = (0.4, 0.1, 0.5)
    s_full = sensors.initial_robot_state(flat_empty_world, 10.0, 10.0, yaw=0.3)
    s_half = sensors.initial_robot_state(flat_empty_world, 10.0, 10.0, yaw=0.3)
    s_full, _ = sensors.step_robot(s_full, cmd, 0.1, flat_empty_world)
    for _ in range(2):
        s_half, _ = sensors.step_robot(s_half, cmd, 0.05, flat_empty_world)
    assert abs(s_full.x - s_half.x) < 1e-9
    assert abs(s_full.y - s_half.y) < 1e-9
    assert abs(s_full.yaw - s_half.yaw) < 1e-9


def test_bog_trap_freezes_translation():
    w = worldmod.generate_forest(extent=(20.0, 20.0), stem_density=0.0, seed=5)
    w.patches.append(
        worldmod.PatchRegion(
            polygon=[(8.0, 8.0), (12.0, 8.0), (12.0, 12.0), (8.0, 12.0)],
            kind="bog",
            severity=1.0,
        )
    )
    state = sensors.initial_robot_state(w, 10.0, 10.0)
    state, events = sensors.step_robot(state, (0.6, 0.0, 0.0), 0.1, w)
    assert "trap" in events
    assert state.trapped
    assert (state.x, state.y) == (10.0, 10.0)
    # manual control cannot crawl out of a severity-1.0 bog either
    state, _ = sensors.step_robot(state, (0.6, 0.0, 0.0), 0.1, w, manual=True)
    assert (state.x, state.y) == (10.0, 10.0)


def test_undergrowth_slows_robot():
    w = worldmod.generate_forest(extent=(20.0, 20.0), stem_density=0.0, seed=5)
    w.patches.append(
        worldmod.PatchRegion(
            polygon=[(8.0, 8.0), (12.0, 8.0), (12.0, 12.0), (8.0, 12.0)],
            kind="undergrowth",
            severity=1.0,
        )
    )
    state = sensors.initial_robot_state(w, 10.0, 10.0)
    state, _ = sensors.step_robot(state, (0.6, 0.0, 0.0), 0.1, w)
    expected = 0.6 * (1.0 - sensors.UNDERGROWTH_SLOWDOWN) * 0.1
    assert state.x - 10.0 == pytest.approx(expected)


def test_corrupt_odometry_zero_drift_is_exact():
    model = sensors.OdometryModel(trans_drift=0.0, yaw_drift=0.0)
    rel = se3.pose_xyyaw(1.0, 0.2, 0.1)
    out = sensors.corrupt_odometry(rel, model, 5.0, np.random.default_rng(0))
    assert np.array_equal(out, rel)


def test_corrupt_odometry_zero_distance_identity_perturbation():
    model = sensors.OdometryModel(trans_drift=0.1, yaw_drift=0.1)
    rel = se3.pose_xyyaw(0.5, 0.0, 0.0)
    out = sensors.corrupt_odometry(rel, model, 0.0, np.random.default_rng(0))
    assert np.array_equal(out, rel)


def test_corrupt_odometry_random_walk_scale():
    # Oracle: per-axis noise std sigma*sqrt(d) accumulated over a straight
    # 100 m walk in 1 m segments gives end-point std sigma*sqrt(100).
    sigma = 0.1
    model = sensors.OdometryModel(trans_drift=sigma, yaw_drift=0.0)
    seg = se3.pose_xyyaw(1.0, 0.0, 0.0)
    errors = []
    for seed in range(500):
        rng = np.random.default_rng(seed)
        pose = np.eye(4)
        for _ in range(100):
            pose = pose @ sensors.corrupt_odometry(seg, model, 1.0, rng)
        errors.append(pose[0, 3] - 100.0)
    std = float(np.std(errors))
    assert std == pytest.approx(sigma * 10.0, rel=0.15)


def test_corrupt_odometry_unbiased_identity():
    model = sensors.OdometryModel(trans_drift=0.05, yaw_drift=0.01)
    rng = np.random.default_rng(3)
    offsets = []
    for _ in range(400):
        out = sensors.corrupt_odometry(np.eye(4), model, 1.0, rng)
        offsets.append(out[:2, 3])
    mean = np.mean(offsets, axis=0)
    assert np.linalg.norm(mean) < 4 * 0.05 / np.sqrt(400)


def test_corrupt_odometry_chunk_invariance():
    # 1 x 4 m hop and 4 x 1 m hops must produce the same error scale
    model = sensors.OdometryModel(trans_drift=0.05, yaw_drift=0.0)
    seg4 = se3.pose_xyyaw(4.0, 0.0, 0.0)
    seg1 = se3.pose_xyyaw(1.0, 0.0, 0.0)
    one_hop, four_hops = [], []
    for seed in range(400):
        rng = np.random.default_rng(seed)
        one_hop.append(sensors.corrupt_odometry(seg4, model, 4.0, rng)[0, 3] - 4.0)
        rng = np.random.default_rng(10_000 + seed)
        pose = np.eye(4)
        for _ in range(4):
            pose = pose @ sensors.corrupt_odometry(seg1, model, 1.0, rng)
        four_hops.append(pose[0, 3] - 4.0)
    assert np.std(one_hop) == pytest.approx(np.std(four_hops), rel=0.25)


def test_lidar_model_validation():
    with pytest.raises(ValueError):
        sensors.LidarModel(200.0, 16, 1.0, 10.0, 30.0, 0.0, 0.3)
    with pytest.raises(ValueError):
        sensors.LidarModel(30.0, 16, 1.0, 10.0, 30.0, -0.1, 0.3)
