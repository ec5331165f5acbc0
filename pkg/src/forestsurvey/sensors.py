"""LiDAR, odometry-drift, and kinematic robot simulation.

The locomotion controller is abstracted to perfect velocity tracking plus
bog traps and undergrowth slowdown; odometry error is injected on relative
poses as a distance-scaled random walk.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import accel, se3

MAX_SPEED = 0.6  # m/s, matches the platform's average field speed
BODY_HEIGHT = 0.6  # m above terrain
TRAP_SEVERITY = 0.8  # bog severity at which translation freezes
UNDERGROWTH_SLOWDOWN = 0.6  # speed scale = 1 - slowdown * severity
CLUTTER_STEP = 0.25  # m sampling step for undergrowth clutter returns
CLUTTER_BAND = 0.5  # m above ground
CLUTTER_DENSITY = 0.3  # per-sample return probability scale


@dataclass(frozen=True)
class LidarModel:
    vertical_fov_deg: float
    channels: int
    azimuth_res_deg: float
    scan_rate_hz: float
    max_range: float
    range_noise_std: float
    mount_height: float  # above robot base, m

    def __post_init__(self):
        if not 0.0 < self.vertical_fov_deg <= 180.0:
            raise ValueError("vertical FOV must lie in (0, 180]")
        if self.range_noise_std < 0.0:
            raise ValueError("range noise must be >= 0")

    def ray_directions(self):
        """Unit rays in the sensor frame, (channels * azimuths, 3)."""
        half = np.deg2rad(self.vertical_fov_deg) / 2.0
        if self.channels == 1:
            elev = np.zeros(1)
        else:
            elev = np.linspace(-half, half, self.channels)
        azim = np.arange(0.0, 360.0, self.azimuth_res_deg)
        azim = np.deg2rad(azim)
        ce, se = np.cos(elev), np.sin(elev)
        ca, sa = np.cos(azim), np.sin(azim)
        dirs = np.empty((self.channels * len(azim), 3))
        n_az = len(azim)
        for c in range(self.channels):
            sl = slice(c * n_az, (c + 1) * n_az)
            dirs[sl, 0] = ce[c] * ca
            dirs[sl, 1] = ce[c] * sa
            dirs[sl, 2] = se[c]
        return dirs


LIDAR_PRESETS = {
    "narrow-30": LidarModel(
        vertical_fov_deg=30.0,
        channels=16,
        azimuth_res_deg=1.0,
        scan_rate_hz=10.0,
        max_range=30.0,
        range_noise_std=0.01,
        mount_height=0.3,
    ),
    "wide-104": LidarModel(
        vertical_fov_deg=104.0,
        channels=64,
        azimuth_res_deg=1.0,
        scan_rate_hz=10.0,
        max_range=30.0,
        range_noise_std=0.01,
        mount_height=0.3,
    ),
}


@dataclass
class ScanFrame:
    timestamp: float
    sensor_pose: np.ndarray  # SE(3), world frame at capture
    points: np.ndarray  # (N, 3), sensor frame

    def points_world(self):
        return se3.transform_points(self.sensor_pose, self.points)


@dataclass(frozen=True)
class OdometryModel:
    # defaults keep raw odometry visibly drifting over a 200 m mission while
    # leaving stem observations sharp at the 15 m effective range; the yaw
    # term multiplies by long lever arms, so it sits well below translation
    trans_drift: float = 0.003  # m per sqrt(m) traveled
    yaw_drift: float = 0.0003  # rad per sqrt(m) traveled
    undergrowth_multiplier: float = 3.0

    def __post_init__(self):
        if min(self.trans_drift, self.yaw_drift, self.undergrowth_multiplier) < 0:
            raise ValueError("drift parameters must be >= 0")


@dataclass
class RobotState:
    x: float
    y: float
    yaw: float
    z: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    wz: float = 0.0
    trapped: bool = False

    def pose(self):
        return se3.pose_xyyaw(self.x, self.y, self.yaw, z=self.z)


def initial_robot_state(world, x, y, yaw=0.0):
    return RobotState(x=x, y=y, yaw=yaw, z=world.terrain.height_at(x, y) + BODY_HEIGHT)


def sensor_pose(robot, lidar):
    """Sensor mounted straight above the (always upright) base."""
    T = robot.pose()
    T[2, 3] += lidar.mount_height
    return T


def simulate_scan(world, pose, lidar, rng=None, timestamp=0.0):
    """One full sweep: a ray per (channel, azimuth), Gaussian range noise."""
    ext = world.extent
    x, y = pose[0, 3], pose[1, 3]
    if not (0.0 <= x <= ext[0] and 0.0 <= y <= ext[1]):
        raise ValueError("sensor pose outside world extent")
    dirs_sensor = lidar.ray_directions()
    dirs_world = dirs_sensor @ pose[:3, :3].T
    origin = pose[:3, 3]
    ranges, surfs = accel.trace_rays(origin, dirs_world, lidar.max_range, world.arrays())

    if world.clutter_returns and world.patches:
        ranges = _apply_clutter(world, origin, dirs_world, ranges, lidar.max_range, rng)

    hit = ranges > 0.0
    r = ranges[hit]
    if rng is not None and lidar.range_noise_std > 0.0 and len(r):
        r = r + rng.normal(0.0, lidar.range_noise_std, size=len(r))
        r = np.clip(r, 0.0, lidar.max_range)
    points = dirs_sensor[hit] * r[:, None]
    return ScanFrame(timestamp=timestamp, sensor_pose=pose.copy(), points=points)


def _apply_clutter(world, origin, dirs, ranges, max_range, rng):
    """Undergrowth clutter: probabilistic returns 0-0.5 m above ground.

    Only the ray segments crossing a patch's bounding box are marched.
    """
    under = [p for p in world.patches if p.kind == "undergrowth" and p.severity > 0]
    if not under or rng is None:
        return ranges
    from . import geometry

    limit = np.where(ranges > 0.0, ranges, max_range)
    clutter_s = np.full(len(dirs), np.inf)
    terrain = world.terrain
    for patch in under:
        xmin, ymin = patch.polygon.min(axis=0)
        xmax, ymax = patch.polygon.max(axis=0)
        s_lo = np.full(len(dirs), 0.5)
        s_hi = limit.copy()
        for d, o, lo, hi in ((dirs[:, 0], origin[0], xmin, xmax),
                             (dirs[:, 1], origin[1], ymin, ymax)):
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (lo - o) / d
                tb = (hi - o) / d
            tmin = np.minimum(ta, tb)
            tmax = np.maximum(ta, tb)
            live = np.abs(d) > 1e-12
            s_lo = np.where(live, np.maximum(s_lo, tmin), s_lo)
            s_hi = np.where(live, np.minimum(s_hi, tmax), s_hi)
            s_hi = np.where(~live & ((o < lo) | (o > hi)), -1.0, s_hi)
        idx = np.flatnonzero(s_hi > s_lo)
        if len(idx) == 0:
            continue
        cur = s_lo[idx] + 0.5 * CLUTTER_STEP
        end = s_hi[idx]
        undecided = np.ones(len(idx), dtype=bool)
        while True:
            live = undecided & (cur < end) & (cur < clutter_s[idx])
            if not np.any(live):
                break
            sub = np.flatnonzero(live)
            rays = idx[sub]
            s = cur[sub]
            px = origin[0] + s * dirs[rays, 0]
            py = origin[1] + s * dirs[rays, 1]
            pz = origin[2] + s * dirs[rays, 2]
            ground = terrain.height_at(px, py)
            band = (pz >= ground) & (pz <= ground + CLUTTER_BAND)
            if np.any(band):
                pts = np.column_stack([px[band], py[band]])
                inside = geometry.point_in_polygon(pts, patch.polygon)
                fire = rng.random(int(band.sum())) < (
                    CLUTTER_DENSITY * patch.severity * inside
                )
                hit = sub[band][fire]
                clutter_s[idx[hit]] = np.minimum(clutter_s[idx[hit]], cur[hit])
                undecided[hit] = False
            cur = cur + CLUTTER_STEP
    out = ranges.copy()
    fired = clutter_s < limit
    out[fired] = clutter_s[fired]
    return out


def step_robot(state, cmd, dt, world, manual=False):
    """Integrate a 3-DoF velocity command over dt.

    Returns (new_state, events). Commands saturate at MAX_SPEED; bog
    patches at trap severity freeze translation (manual control can still
    crawl out unless severity is 1.0); undergrowth scales speed down.
    """
    if not 0.0 < dt <= 0.1:
        raise ValueError("dt must lie in (0, 0.1]")
    vx, vy, wz = float(cmd[0]), float(cmd[1]), float(cmd[2])
    speed = float(np.hypot(vx, vy))
    if speed > MAX_SPEED:
        vx *= MAX_SPEED / speed
        vy *= MAX_SPEED / speed

    events = []
    patch = world.patch_at(state.x, state.y)
    scale = 1.0
    trapped = False
    if patch is not None:
        if patch.kind == "bog" and patch.severity >= TRAP_SEVERITY:
            trapped = True
            if manual:
                scale = max(0.0, 1.0 - patch.severity)
            else:
                scale = 0.0
            if not state.trapped:
                events.append("trap")
        elif patch.kind == "undergrowth":
            scale = max(0.1, 1.0 - UNDERGROWTH_SLOWDOWN * patch.severity)
        elif patch.kind == "bog":
            scale = max(0.2, 1.0 - 0.5 * patch.severity)

    x, y, yaw = se3.integrate_planar_twist(
        state.x, state.y, state.yaw, vx * scale, vy * scale, wz, dt
    )
    ext = world.extent
    x = float(np.clip(x, 0.0, ext[0]))
    y = float(np.clip(y, 0.0, ext[1]))
    new = RobotState(
        x=x,
        y=y,
        yaw=yaw,
        z=world.terrain.height_at(x, y) + BODY_HEIGHT,
        vx=vx * scale,
        vy=vy * scale,
        wz=wz,
        trapped=trapped,
    )
    return new, events


def drift_scale_at(world, x, y, model):
    """Odometry drift multiplier from the patch under the robot."""
    patch = world.patch_at(x, y)
    if patch is not None and patch.kind == "undergrowth":
        return 1.0 + (model.undergrowth_multiplier - 1.0) * patch.severity
    return 1.0


def corrupt_odometry(true_rel_pose, model, dist_traveled, rng, drift_scale=1.0):
    """Right-multiply a planar drift perturbation onto a relative pose.

    Per-axis noise std is drift * sqrt(distance), which makes the
    accumulated error independent of how the path is chunked.
    """
    if dist_traveled < 0:
        raise ValueError("distance traveled must be >= 0")
    if dist_traveled == 0.0:
        return true_rel_pose.copy()
    s = np.sqrt(dist_traveled) * drift_scale
    nx, ny = rng.normal(0.0, model.trans_drift * s, size=2)
    nyaw = rng.normal(0.0, model.yaw_drift * s)
    return true_rel_pose @ se3.pose_xyyaw(nx, ny, nyaw)
