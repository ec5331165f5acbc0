"""Three-level autonomy: survey planning, waypoint scheduling, local planning.

The survey planner lays serpentine (lawn-mower) rows over an operator
polygon. The mission planner schedules waypoints with a coarse switch
radius, watches progress, and skips waypoints it deems unreachable. The
local planner scores terrain traversability, derives a cost-to-go

    c = w_trav * (1 - s_trav) + w_unkn * s_unkn

and combines two vector fields from it: goal attraction down the geodesic
distance field and obstacle repulsion up the signed distance field.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import accel, geometry, se3

ROW_SPACING_DEFAULT = 8.0  # m between serpentine rows
WAYPOINT_SPACING_DEFAULT = 2.0  # m along rows
MIN_ROW_SEPARATION = 4.0  # m lower bound on parallel segment separation
BOUNDARY_INSET = 0.5  # m kept clear of the polygon edge

SLOPE_MAX_DEG = 30.0
ROUGH_MAX = 0.1  # m
W_SLOPE = 0.5
W_ROUGH = 0.5

SWITCH_RADIUS = 3.0  # m, inside the paper's 2-4 m band
STALL_WINDOW = 20.0  # s without progress before a waypoint is unreachable
STALL_PROGRESS = 0.3  # m of improvement that resets the stall clock
STUCK_DEBOUNCE_S = 3.0  # sustained stuck reports before declaring unreachable
REPLAN_LOOKAHEAD = 10  # waypoints considered when skipping an unreachable one

K_GOAL = 1.0
K_OBS = 0.5
K_YAW = 1.5
REPULSE_RANGE = 1.0  # m, repulsion active where SDF < this
MAX_SPEED = 0.6  # m/s
MAX_YAW_RATE = 1.2  # rad/s

SDF_INF = np.inf


class PlanningError(ValueError):
    pass


class OperatorCommandError(RuntimeError):
    pass


@dataclass
class SurveyArea:
    polygon: np.ndarray  # (N, 2) world frame
    entry_pose: tuple  # (x, y, yaw)

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=float)
        if len(self.polygon) < 3 or not geometry.polygon_is_simple(self.polygon):
            raise PlanningError("survey polygon must be simple")
        if abs(geometry.polygon_area(self.polygon)) <= 0.0:
            raise PlanningError("survey polygon must enclose area")


@dataclass
class SurveyPlan:
    waypoints: np.ndarray  # (N, 4): x, y, z, yaw
    row_spacing: float
    waypoint_spacing: float

    def __len__(self):
        return len(self.waypoints)

    def xy(self):
        return self.waypoints[:, :2]


@dataclass
class PlannerWeights:
    w_trav: float = 1.0
    w_unkn: float = 0.5
    s_unkn: float = 0.4
    obstacle_threshold: float = 0.6

    def __post_init__(self):
        if self.w_trav < 0 or self.w_unkn < 0:
            raise ValueError("weights must be >= 0")
        if not 0.0 <= self.s_unkn <= 1.0:
            raise ValueError("s_unkn must lie in [0, 1]")
        if not 0.0 < self.obstacle_threshold < 1.0 + self.w_unkn + self.w_trav:
            raise ValueError("obstacle threshold out of range")


@dataclass
class TraversabilityGrid:
    score: np.ndarray  # s_trav in [0, 1]; value where known
    known: np.ndarray  # bool mask
    origin_xy: tuple
    cell: float


# ---------------------------------------------------------------------------
# survey planning
# ---------------------------------------------------------------------------


def plan_boustrophedon(area, row_spacing=ROW_SPACING_DEFAULT,
                       waypoint_spacing=WAYPOINT_SPACING_DEFAULT,
                       min_row_separation=MIN_ROW_SEPARATION):
    """Axis-aligned serpentine coverage rows clipped to the polygon.

    Rows run along the longer bounding-box axis; the plan starts at the
    row end nearest the entry pose and finishes with a return leg to it.
    """
    if row_spacing <= 0 or waypoint_spacing <= 0:
        raise PlanningError("spacings must be positive")
    if row_spacing < min_row_separation:
        raise PlanningError("row spacing below the minimum separation constraint")
    poly = area.polygon
    xmin, ymin = poly.min(axis=0)
    xmax, ymax = poly.max(axis=0)
    along_x = (xmax - xmin) >= (ymax - ymin)
    if not along_x:
        # plan in a flipped frame, then swap coordinates back
        flipped = SurveyArea(polygon=poly[:, ::-1].copy(),
                             entry_pose=(area.entry_pose[1], area.entry_pose[0], 0.0))
        plan = plan_boustrophedon(flipped, row_spacing, waypoint_spacing,
                                  min_row_separation)
        wps = plan.waypoints.copy()
        wps[:, [0, 1]] = wps[:, [1, 0]]
        wps[:, 3] = _travel_yaws(wps[:, :2])
        return SurveyPlan(wps, row_spacing, waypoint_spacing)

    cross = (ymax - ymin) - 2.0 * BOUNDARY_INSET
    if cross <= 0:
        raise PlanningError("polygon thinner than twice the boundary inset")
    if cross <= row_spacing:
        n_rows = 1
        row_ys = [ymin + BOUNDARY_INSET + cross / 2.0]
    else:
        n_rows = int(np.ceil(cross / row_spacing)) + 1
        spacing = cross / (n_rows - 1)
        if spacing < min_row_separation:
            n_rows = max(2, int(np.floor(cross / min_row_separation)) + 1)
            spacing = cross / (n_rows - 1)
        row_ys = [ymin + BOUNDARY_INSET + k * spacing for k in range(n_rows)]

    entry = np.asarray(area.entry_pose[:2], dtype=float)
    rows = []
    for y in row_ys:
        intervals = geometry.scanline_intervals(poly, y)
        if not intervals:
            continue
        # keep the widest interval; survey rows need a contiguous run
        x0, x1 = max(intervals, key=lambda ab: ab[1] - ab[0])
        x0 += BOUNDARY_INSET
        x1 -= BOUNDARY_INSET
        if x1 <= x0:
            continue
        length = x1 - x0
        n_wp = max(2, int(round(length / waypoint_spacing)) + 1)
        xs = np.linspace(x0, x1, n_wp)
        rows.append(np.column_stack([xs, np.full(n_wp, y)]))
    if not rows:
        raise PlanningError("no survey rows fit inside the polygon")

    # serpentine: orient the first row toward the entry, then alternate
    first = rows[0]
    if np.linalg.norm(first[-1] - entry) < np.linalg.norm(first[0] - entry):
        rows = [r[::-1] for r in rows]
    pts = []
    for k, row in enumerate(rows):
        pts.append(row if k % 2 == 0 else row[::-1])
    pts = np.vstack(pts)
    pts = np.vstack([pts, entry[None, :]])  # return toward the start

    inside = geometry.point_in_polygon(pts[:-1], poly)
    if not inside.all():
        raise PlanningError("planned waypoints escaped the polygon")
    yaws = _travel_yaws(pts)
    wps = np.column_stack([pts, np.zeros(len(pts)), yaws])
    return SurveyPlan(wps, row_spacing, waypoint_spacing)


def _travel_yaws(pts):
    yaws = np.zeros(len(pts))
    diffs = np.diff(pts[:, :2], axis=0)
    for k, d in enumerate(diffs):
        yaws[k] = np.arctan2(d[1], d[0]) if np.linalg.norm(d) > 1e-12 else yaws[k - 1]
    if len(pts) > 1:
        yaws[-1] = yaws[-2]
    return yaws


# ---------------------------------------------------------------------------
# traversability / cost / fields
# ---------------------------------------------------------------------------


def score_from_features(slope_deg, roughness):
    """s_trav = 1 - clamp(w_s * slope/slope_max + w_r * rough/rough_max)."""
    penalty = W_SLOPE * slope_deg / SLOPE_MAX_DEG + W_ROUGH * roughness / ROUGH_MAX
    return 1.0 - np.clip(penalty, 0.0, 1.0)


def traversability_score(terrain_map):
    """Slope + roughness heuristic over the local terrain map."""
    elev = terrain_map.elevation()
    known = np.isfinite(elev)
    cell = terrain_map.cell
    filled = np.where(known, elev, np.nan)

    grad_y = np.full_like(filled, 0.0)
    grad_x = np.full_like(filled, 0.0)
    # central differences where both neighbors known, one-sided otherwise
    for grad, axis in ((grad_y, 0), (grad_x, 1)):
        fwd = np.roll(filled, -1, axis=axis)
        back = np.roll(filled, 1, axis=axis)
        both = np.isfinite(fwd) & np.isfinite(back)
        fwd_ok = np.isfinite(fwd) & ~both
        back_ok = np.isfinite(back) & ~both
        grad[both] = (fwd[both] - back[both]) / (2 * cell)
        grad[fwd_ok] = (fwd[fwd_ok] - filled[fwd_ok]) / cell
        grad[back_ok] = (filled[back_ok] - back[back_ok]) / cell
        # rolled edges wrap around; sever them
        if axis == 0:
            grad[0, :] = np.where(np.isfinite(filled[1, :]) & np.isfinite(filled[0, :]),
                                  (filled[1, :] - filled[0, :]) / cell, 0.0)
            grad[-1, :] = np.where(np.isfinite(filled[-1, :]) & np.isfinite(filled[-2, :]),
                                   (filled[-1, :] - filled[-2, :]) / cell, 0.0)
        else:
            grad[:, 0] = np.where(np.isfinite(filled[:, 1]) & np.isfinite(filled[:, 0]),
                                  (filled[:, 1] - filled[:, 0]) / cell, 0.0)
            grad[:, -1] = np.where(np.isfinite(filled[:, -1]) & np.isfinite(filled[:, -2]),
                                   (filled[:, -1] - filled[:, -2]) / cell, 0.0)
    grad_x = np.nan_to_num(grad_x)
    grad_y = np.nan_to_num(grad_y)
    slope_deg = np.rad2deg(np.arctan(np.hypot(grad_x, grad_y)))
    rough = terrain_map.roughness()
    score = np.where(known, score_from_features(slope_deg, rough), 0.0)
    return TraversabilityGrid(
        score=score,
        known=known,
        origin_xy=terrain_map.origin_xy(),
        cell=cell,
    )


def cost_to_go(trav, weights):
    """Exact per-cell cost: known w_trav(1-s); unknown w_unkn*s_unkn."""
    return np.where(
        trav.known,
        weights.w_trav * (1.0 - trav.score),
        weights.w_unkn * weights.s_unkn,
    )


def compute_sdf(cost, obstacle_threshold, cell):
    """Signed Euclidean distance (m) to thresholded obstacle cells."""
    if not 0.0 < obstacle_threshold:
        raise ValueError("obstacle threshold must be positive")
    obstacle = cost >= obstacle_threshold
    if not obstacle.any():
        return np.full(cost.shape, SDF_INF)
    d_out = ndimage.distance_transform_edt(~obstacle, sampling=cell)
    d_in = ndimage.distance_transform_edt(obstacle, sampling=cell)
    return np.where(obstacle, -d_in, d_out)


def compute_gdf(cost, goal_cell, obstacle_threshold, cell):
    """Dijkstra distance-to-goal; obstacle cells are impassable (+inf)."""
    obstacle = cost >= obstacle_threshold
    gi, gj = int(goal_cell[0]), int(goal_cell[1])
    if not (0 <= gi < cost.shape[0] and 0 <= gj < cost.shape[1]):
        raise PlanningError("goal cell outside the grid")
    if obstacle[gi, gj]:
        raise PlanningError("goal lies on an obstacle cell")
    return accel.geodesic_field(cost, ~obstacle, (gi, gj), cell)


def _bilinear_grad(grid, i, j):
    """Finite-difference gradient at integer cell, ignoring inf neighbors."""
    h, w = grid.shape

    def val(a, b):
        a = min(max(a, 0), h - 1)
        b = min(max(b, 0), w - 1)
        return grid[a, b]

    c = val(i, j)
    gy = 0.0
    gx = 0.0
    up, down = val(i + 1, j), val(i - 1, j)
    if np.isfinite(up) and np.isfinite(down):
        gy = (up - down) / 2.0
    elif np.isfinite(up) and np.isfinite(c):
        gy = up - c
    elif np.isfinite(down) and np.isfinite(c):
        gy = c - down
    right, left = val(i, j + 1), val(i, j - 1)
    if np.isfinite(right) and np.isfinite(left):
        gx = (right - left) / 2.0
    elif np.isfinite(right) and np.isfinite(c):
        gx = right - c
    elif np.isfinite(left) and np.isfinite(c):
        gx = c - left
    return gx, gy


@dataclass
class LocalPlanResult:
    cmd: tuple  # (vx, vy, wz) body frame
    stuck: bool
    goal_dir_world: tuple = (0.0, 0.0)


def local_plan_step(sdf, gdf, robot_pose, origin_xy, cell,
                    k_goal=K_GOAL, k_obs=K_OBS, max_speed=MAX_SPEED):
    """Reactive command from goal attraction + obstacle repulsion fields."""
    x, y = robot_pose[0, 3], robot_pose[1, 3]
    yaw = se3.yaw_of(robot_pose)
    j = int((x - origin_xy[0]) / cell)
    i = int((y - origin_xy[1]) / cell)
    h, w = gdf.shape
    if not (0 <= i < h and 0 <= j < w):
        return LocalPlanResult((0.0, 0.0, 0.0), stuck=True)
    sdf_here = sdf[i, j]
    if sdf_here < 0.0:
        return LocalPlanResult((0.0, 0.0, 0.0), stuck=True)
    if not np.isfinite(gdf[i, j]):
        return LocalPlanResult((0.0, 0.0, 0.0), stuck=True)

    ggx, ggy = _bilinear_grad(gdf, i, j)
    goal_vec = np.array([-ggx, -ggy])
    norm = np.linalg.norm(goal_vec)
    if norm > 1e-9:
        goal_vec /= norm
    v = k_goal * goal_vec

    if np.isfinite(sdf_here) and sdf_here < REPULSE_RANGE:
        sgx, sgy = _bilinear_grad(sdf, i, j)
        away = np.array([sgx, sgy])
        n = np.linalg.norm(away)
        if n > 1e-9:
            away /= n
            strength = 1.0 / max(sdf_here, 0.05) - 1.0 / REPULSE_RANGE
            v = v + k_obs * strength * away

    speed = np.linalg.norm(v)
    if speed > 1e-9:
        v = v / speed * min(speed * max_speed, max_speed)
    heading = np.arctan2(v[1], v[0]) if np.linalg.norm(v) > 1e-9 else yaw
    yaw_err = float(se3.wrap_angle(heading - yaw))
    wz = float(np.clip(K_YAW * yaw_err, -MAX_YAW_RATE, MAX_YAW_RATE))
    c, s = np.cos(-yaw), np.sin(-yaw)
    vx = c * v[0] - s * v[1]
    vy = s * v[0] + c * v[1]
    return LocalPlanResult((float(vx), float(vy), wz), stuck=False,
                           goal_dir_world=(float(goal_vec[0]), float(goal_vec[1])))


# ---------------------------------------------------------------------------
# mission state machine
# ---------------------------------------------------------------------------

STATUSES = (
    "idle",
    "running",
    "paused",
    "manual-override",
    "waypoint-unreachable",
    "completed",
    "aborted",
)


@dataclass
class MissionState:
    plan: SurveyPlan
    index: int = 0
    status: str = "idle"
    best_dist: float = np.inf
    stall_time: float = 0.0
    stuck_time: float = 0.0
    manual_cmd: tuple = (0.0, 0.0, 0.0)
    manual_until: float = -1.0
    resume_status: str = "running"
    events: list = field(default_factory=list)

    def goal(self):
        if self.index < len(self.plan.waypoints):
            return self.plan.waypoints[self.index]
        return None

    def _reset_tracker(self):
        self.best_dist = np.inf
        self.stall_time = 0.0
        self.stuck_time = 0.0


@dataclass
class PlannerFeedback:
    stuck: bool = False
    cost: np.ndarray | None = None
    origin_xy: tuple = (0.0, 0.0)
    cell: float = 1.0
    obstacle_threshold: float = 0.6


def start_mission(plan):
    return MissionState(plan=plan, status="running")


def _corridor_blocked(feedback, start_xy, goal_xy):
    """Straight-line corridor test inside the local cost map; unknown passes."""
    if feedback.cost is None:
        return False
    cost = feedback.cost
    h, w = cost.shape
    start = np.asarray(start_xy, dtype=float)
    goal = np.asarray(goal_xy, dtype=float)
    length = np.linalg.norm(goal - start)
    if length < 1e-9:
        return False
    d = (goal - start) / length
    lateral = np.array([-d[1], d[0]])
    for along in np.arange(0.0, length, feedback.cell):
        for off in (-0.3, 0.0, 0.3):
            p = start + along * d + off * lateral
            j = int((p[0] - feedback.origin_xy[0]) / feedback.cell)
            i = int((p[1] - feedback.origin_xy[1]) / feedback.cell)
            if not (0 <= i < h and 0 <= j < w):
                continue  # beyond the local map: unknown, passes
            if cost[i, j] >= feedback.obstacle_threshold:
                return True
    return False


def mission_step(mission, robot_pose, feedback, dt, now=0.0,
                 switch_radius=SWITCH_RADIUS):
    """Advance the waypoint schedule; returns the active goal (or None)."""
    if mission.status == "manual-override" and now >= mission.manual_until >= 0.0:
        mission.status = mission.resume_status
        mission.events.append(("manual-end", now))
    if mission.status != "running":
        return None
    goal = mission.goal()
    if goal is None:
        mission.status = "completed"
        mission.events.append(("completed", now))
        return None
    xy = robot_pose[:2, 3]
    d = float(np.linalg.norm(goal[:2] - xy))
    if d <= switch_radius:
        mission.events.append(("waypoint-reached", now, mission.index))
        mission.index += 1
        mission._reset_tracker()
        if mission.index >= len(mission.plan.waypoints):
            mission.status = "completed"
            mission.events.append(("completed", now))
            return None
        return mission.goal()

    if mission.best_dist - d >= STALL_PROGRESS:
        mission.best_dist = d
        mission.stall_time = 0.0
    else:
        mission.stall_time += dt
    mission.stuck_time = mission.stuck_time + dt if feedback.stuck else 0.0

    if mission.stall_time >= STALL_WINDOW or mission.stuck_time >= STUCK_DEBOUNCE_S:
        mission.status = "waypoint-unreachable"
        mission.events.append(("unreachable", now, mission.index))
        new_index = None
        last = min(mission.index + 1 + REPLAN_LOOKAHEAD, len(mission.plan.waypoints))
        for k in range(mission.index + 1, last):
            if not _corridor_blocked(feedback, xy, mission.plan.waypoints[k][:2]):
                new_index = k
                break
        if new_index is None:
            new_index = mission.index + 1
        mission.events.append(("replan", now, mission.index, new_index))
        mission.index = new_index
        mission._reset_tracker()
        if mission.index >= len(mission.plan.waypoints):
            mission.status = "completed"
            mission.events.append(("completed", now))
            return None
        mission.status = "running"
        return mission.goal()
    return goal


def apply_operator_command(mission, command, now=0.0):
    """pause / resume(goal?) / manual(cmd, duration) / abort transitions."""
    kind = command["kind"]
    if mission.status == "aborted" and kind != "abort":
        raise OperatorCommandError("mission already aborted")
    if kind == "pause":
        if mission.status in ("running", "manual-override", "waypoint-unreachable"):
            mission.status = "paused"
            mission.events.append(("pause", now))
    elif kind == "resume":
        if mission.status == "completed" and command.get("goal") is None:
            raise OperatorCommandError("mission already completed")
        goal = command.get("goal")
        if goal is not None:
            if not 0 <= int(goal) < len(mission.plan.waypoints):
                raise OperatorCommandError("resume goal out of range")
            mission.index = int(goal)
            mission._reset_tracker()
            mission.events.append(("resume-goal", now, int(goal)))
        else:
            mission.events.append(("resume", now))
        mission.status = "running"
        mission.manual_until = -1.0
    elif kind == "manual":
        mission.resume_status = (
            "running" if mission.status in ("running", "manual-override",
                                            "waypoint-unreachable")
            else mission.status
        )
        mission.status = "manual-override"
        mission.manual_cmd = tuple(command.get("cmd", (0.0, 0.0, 0.0)))
        mission.manual_until = now + float(command.get("duration", 0.0))
        mission.events.append(("manual", now, float(command.get("duration", 0.0))))
    elif kind == "abort":
        mission.status = "aborted"
        mission.events.append(("abort", now))
    else:
        raise OperatorCommandError(f"unknown command kind {kind!r}")
    return mission
