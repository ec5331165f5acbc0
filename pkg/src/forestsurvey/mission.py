"""Mission orchestration: config, the closed-loop simulation, and replay.

A mission runs world generation, survey planning, the 10 Hz control loop
(LiDAR, drifting odometry, pose-graph SLAM with loop closures, payload
accumulation, online inventory, local planning), an optional scripted
safety operator, and finally exports every artifact. Runs are
deterministic for a fixed config and seed.
"""

import importlib.resources
import json
import math
import os
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import autonomy, inventory, metrics, reloc, se3, sensors, slam, world as worldmod
from .pointcloud import write_ply
from .records import write_ground_truth_csv, write_inventory_csv

TICK_DT = 0.1  # s, simulation step
SCAN_PERIOD = 0.5  # s between payload/terrain scans
FIELD_PERIOD = 0.5  # s between traversability/SDF refreshes
LOOP_CHECK_EVERY_NODES = 2
LOOP_MIN_GAP_M = 2.0  # travel between accepted loop closures

OPERATOR_STUCK_DELAY = 1.0  # s of stuck before the scripted operator acts
OPERATOR_RESCUE_S = 6.0
OPERATOR_COOLDOWN_S = 12.0
OPERATOR_MAX_FUTILE_RESCUES = 6

EXIT_COMPLETED = "completed"
EXIT_ABORTED = "aborted"
EXIT_TRAPPED = "trapped"


class ConfigError(ValueError):
    pass


def _schema(name):
    ref = importlib.resources.files("forestsurvey.schemas").joinpath(name)
    return json.loads(ref.read_text())


@dataclass
class MissionConfig:
    raw: dict
    mission_id: str
    seed: int
    out_dir: str
    real_time_factor: float
    max_sim_time_s: float
    scene_path: str | None
    world: dict
    lidar: sensors.LidarModel
    odometry: sensors.OdometryModel
    weights: autonomy.PlannerWeights
    switch_radius: float
    loop_radius: float
    survey: dict | None
    row_spacing: float
    waypoint_spacing: float
    min_coverage_deg: float
    safety_operator: str
    reloc: dict


def load_config(data):
    """Validate a config dict against the shipped schema and fill defaults."""
    try:
        jsonschema.validate(data, _schema("mission_config.schema.json"))
    except jsonschema.ValidationError as err:
        raise ConfigError(f"config invalid at {list(err.absolute_path)}: {err.message}")

    lidar_cfg = data.get("lidar", {})
    preset = sensors.LIDAR_PRESETS[lidar_cfg.get("preset", "wide-104")]
    overrides = {k: v for k, v in lidar_cfg.items() if k != "preset"}
    lidar = sensors.LidarModel(**{**preset.__dict__, **overrides})

    odo = data.get("odometry", {})
    odometry = sensors.OdometryModel(
        trans_drift=odo.get("trans_drift", 0.003),
        yaw_drift=odo.get("yaw_drift", 0.0003),
        undergrowth_multiplier=odo.get("undergrowth_multiplier", 3.0),
    )
    pl = data.get("planner", {})
    weights = autonomy.PlannerWeights(
        w_trav=pl.get("w_trav", 1.0),
        w_unkn=pl.get("w_unkn", 0.5),
        s_unkn=pl.get("s_unkn", 0.4),
        obstacle_threshold=pl.get("obstacle_threshold", 0.6),
    )
    rtf = data.get("real_time_factor", "inf")
    rtf = math.inf if rtf in ("inf", None) else float(rtf)
    survey = data.get("survey")
    return MissionConfig(
        raw=data,
        mission_id=data.get("mission_id", f"seed-{data['seed']}"),
        seed=int(data["seed"]),
        out_dir=data.get("out_dir", "out"),
        real_time_factor=rtf,
        max_sim_time_s=data.get("max_sim_time_s", 3600.0),
        scene_path=data.get("scene_path"),
        world=data.get("world", {}),
        lidar=lidar,
        odometry=odometry,
        weights=weights,
        switch_radius=pl.get("switch_radius", autonomy.SWITCH_RADIUS),
        loop_radius=pl.get("loop_radius", slam.LOOP_RADIUS_DEFAULT),
        survey=survey,
        row_spacing=(survey or {}).get("row_spacing", autonomy.ROW_SPACING_DEFAULT),
        waypoint_spacing=(survey or {}).get(
            "waypoint_spacing", autonomy.WAYPOINT_SPACING_DEFAULT
        ),
        min_coverage_deg=data.get("inventory", {}).get(
            "min_coverage_deg", inventory.MIN_COVERAGE_DEG
        ),
        safety_operator=data.get("safety_operator", "scripted"),
        reloc=data.get("reloc", {}),
    )


def load_config_file(path):
    with open(path) as f:
        return load_config(json.load(f))


@dataclass
class MissionArtifacts:
    out_dir: str
    status: str
    mission_log: str
    truth_track: str
    pose_graph: str
    revisions: str
    payload_dir: str
    payload_index: str
    inventory_csv: str
    ground_truth_csv: str
    metrics_csv: str
    scene_json: str
    models_txt: str
    config_json: str
    prior_map: str | None = None


def _build_world(config):
    if config.scene_path:
        return worldmod.load_scene(config.scene_path)
    w = config.world
    return worldmod.generate_forest(
        extent=tuple(w.get("extent", (40.0, 25.0))),
        stem_density=w.get("stem_density", 220.0),
        dbh_distribution=(w.get("dbh_mean", 0.3), w.get("dbh_stddev", 0.07)),
        patch_spec=w.get("patches"),
        seed=config.seed,
        terrain_preset=w.get("terrain_preset", "flat"),
        crown_occlusion=w.get("crown_occlusion", False),
        clutter_returns=w.get("clutter_returns", False),
    )


def _build_survey(config, world):
    if config.survey and "polygon" in config.survey:
        poly = np.asarray(config.survey["polygon"], dtype=float)
        entry = tuple(config.survey.get("entry", (*poly[0], 0.0)))
    else:
        ex, ey = world.extent
        inset = 2.0
        poly = np.array([
            (inset, inset), (ex - inset, inset),
            (ex - inset, ey - inset), (inset, ey - inset),
        ])
        entry = (inset + 0.5, inset + 0.5, 0.0)
    return autonomy.SurveyArea(polygon=poly, entry_pose=entry)


class ScriptedOperator:
    """Safety operator that intervenes only on stuck/trap flags.

    A rescue is a manual retreat toward a recent free position, with the
    bearing alternating sideways on repeated rescues near the same spot.
    A rescue that fails to move the robot marks a true trap; enough of
    those in a row aborts the mission as trapped.
    """

    def __init__(self):
        self.stuck_since = None
        self.cooldown_until = -math.inf
        self.rescue_start = None  # position when the last rescue began
        self.futile = 0
        self.flip = 1.0

    def update(self, t, runner):
        m = runner.mission
        if m.status in ("manual-override", "paused", "completed", "aborted"):
            self.stuck_since = None
            return None
        pos = np.array([runner.robot.x, runner.robot.y])
        if self.rescue_start is not None:
            # judge the finished rescue by how far it actually moved us
            if np.linalg.norm(pos - self.rescue_start) < 0.4:
                self.futile += 1
            else:
                self.futile = 0
            self.rescue_start = None
            if self.futile >= OPERATOR_MAX_FUTILE_RESCUES:
                runner.exit_status = EXIT_TRAPPED
                return {"kind": "abort"}
        stuck = runner.last_stuck or runner.robot.trapped
        if not stuck:
            self.stuck_since = None
            return None
        if self.stuck_since is None:
            self.stuck_since = t
        if t - self.stuck_since < OPERATOR_STUCK_DELAY or t < self.cooldown_until:
            return None

        # retreat toward where the robot was ~8 s ago, biased sideways so
        # consecutive rescues approach the blockage differently
        history = runner.position_history
        back = history[0] if len(history) < 80 else history[-80]
        direction = np.asarray(back) - pos
        norm = np.linalg.norm(direction)
        if norm < 0.3:
            direction = -np.array([np.cos(runner.robot.yaw), np.sin(runner.robot.yaw)])
            norm = 1.0
        direction = direction / norm
        lateral = np.array([-direction[1], direction[0]]) * self.flip
        self.flip = -self.flip
        direction = direction + 0.6 * lateral
        direction /= np.linalg.norm(direction)
        yaw = runner.robot.yaw
        c, s = np.cos(-yaw), np.sin(-yaw)
        vx = 0.5 * (c * direction[0] - s * direction[1])
        vy = 0.5 * (s * direction[0] + c * direction[1])
        self.cooldown_until = t + OPERATOR_RESCUE_S + OPERATOR_COOLDOWN_S
        self.stuck_since = None
        self.rescue_start = pos
        return {"kind": "manual", "cmd": (vx, vy, 0.0), "duration": OPERATOR_RESCUE_S}


class MissionRunner:
    """Owns the full closed-loop simulation for one mission.

    ``stream_inventory`` rebuilds the inventory after every payload so a
    service can stream fresh tree records; headless runs skip that cost and
    export once at the end.
    """

    def __init__(self, config, stream_inventory=False):
        self.stream_inventory = stream_inventory
        self.config = config
        self.world = _build_world(config)
        self.rng = np.random.default_rng(config.seed + 1)
        self.area = _build_survey(config, self.world)
        self.plan = autonomy.plan_boustrophedon(
            self.area, config.row_spacing, config.waypoint_spacing
        )
        self.mission = autonomy.start_mission(self.plan)
        ex, ey, eyaw = self.area.entry_pose
        self.robot = sensors.initial_robot_state(self.world, ex, ey, eyaw)
        self.t = 0.0

        true_sensor = sensors.sensor_pose(self.robot, config.lidar)
        first_scan = sensors.simulate_scan(
            self.world, true_sensor, config.lidar, rng=self.rng, timestamp=0.0
        )
        self.graph = slam.start_graph(true_sensor, scan=first_scan)
        self.odom_pose = true_sensor.copy()
        self.prev_true_sensor = true_sensor.copy()
        self.odom_at_node = {0: true_sensor.copy()}
        self.odom_travel = 0.0

        self.payload_acc = slam.PayloadAccumulator()
        self.registry = inventory.TreeRegistry()
        self.tmap = slam.LocalTerrainMap()
        self.payloads = []  # (payload, revision used)
        self.revision_poses = {}
        self._store_revision()

        self.operator = ScriptedOperator() if config.safety_operator == "scripted" else None
        self.records = []
        self.truth = []
        self.last_stuck = False
        self.last_cmd = (0.0, 0.0, 0.0)
        self.position_history = []
        self.exit_status = None
        self.last_loop_travel = -math.inf
        self.pending_events = []
        self._drained_events = 0
        self.inventory_snapshot = None
        self.new_tree_records = []

        self._fields = None  # (trav, cost, sdf)
        self._fields_t = -math.inf
        self._gdf = None
        self._gdf_key = None
        self._next_scan_t = 0.0
        self.reloc_queries = []  # populated when a prior map is given
        self._prior = None
        if config.reloc.get("prior_map_path"):
            self._prior = reloc.load_prior_map(config.reloc["prior_map_path"])
        self._scan_counter = 0

    # -- helpers ---------------------------------------------------------

    def est_sensor_pose(self):
        nid = self.graph.nodes[-1].node_id
        rel = se3.relative(self.odom_at_node[nid], self.odom_pose)
        return self.graph.nodes[-1].pose @ rel

    def est_robot_pose(self):
        pose = self.est_sensor_pose()
        pose = pose.copy()
        pose[2, 3] -= self.config.lidar.mount_height
        return pose

    def _store_revision(self):
        rev, poses = self.graph.snapshot()
        self.revision_poses[rev] = poses

    def _refresh_fields(self):
        trav = autonomy.traversability_score(self.tmap)
        cost = autonomy.cost_to_go(trav, self.config.weights)
        sdf = autonomy.compute_sdf(
            cost, self.config.weights.obstacle_threshold, self.tmap.cell
        )
        self._fields = (trav, cost, sdf)
        self._fields_t = self.t
        self._gdf_key = None

    def _goal_cell(self, goal_xy, cost):
        """Clamp the active goal into the local map; dodge obstacle cells."""
        origin = self.tmap.origin_xy()
        cell = self.tmap.cell
        half = self.tmap.size * cell / 2.0
        est = self.est_robot_pose()
        rob = est[:2, 3]
        vec = np.asarray(goal_xy) - rob
        dist = np.linalg.norm(vec)
        if dist > half - 0.3:
            vec = vec / dist * (half - 0.3)
        target = rob + vec
        j = int((target[0] - origin[0]) / cell)
        i = int((target[1] - origin[1]) / cell)
        i = int(np.clip(i, 0, self.tmap.size - 1))
        j = int(np.clip(j, 0, self.tmap.size - 1))
        thr = self.config.weights.obstacle_threshold
        if cost[i, j] < thr:
            return (i, j)
        for radius in range(1, 15):
            for di in range(-radius, radius + 1):
                for dj in range(-radius, radius + 1):
                    ni, nj = i + di, j + dj
                    if 0 <= ni < self.tmap.size and 0 <= nj < self.tmap.size:
                        if cost[ni, nj] < thr:
                            return (ni, nj)
        return None

    def _maybe_process_payload(self):
        latest = self.graph.nodes[-1]
        payload = self.payload_acc.maybe_emit(
            latest.node_id, self.odom_at_node[latest.node_id]
        )
        if payload is None:
            return
        snapshot = self.graph.snapshot()
        self._store_revision()
        before = {e.tree_id for e in self.registry.entries}
        inventory.process_payload(payload, snapshot, self.registry)
        self.payloads.append((payload, snapshot[0]))
        self.pending_events.append("payload")
        if self.stream_inventory:
            inv = self.registry.build_inventory(
                snapshot[1], mission_id=self.config.mission_id, timestamp=self.t,
                min_coverage_deg=self.config.min_coverage_deg,
            )
            known = {r.tree_id for r in (self.inventory_snapshot.records
                                         if self.inventory_snapshot else [])}
            self.new_tree_records = [r for r in inv.records if r.tree_id not in known]
            self.inventory_snapshot = inv

    def operator_command(self, command):
        autonomy.apply_operator_command(self.mission, command, now=self.t)

    # -- main loop -------------------------------------------------------

    def step(self):
        """One 10 Hz tick; returns False when the mission is over."""
        cfg = self.config
        scan = None
        true_sensor = sensors.sensor_pose(self.robot, cfg.lidar)

        # odometry every tick; fresh scan whenever a node will be created
        true_rel = se3.relative(self.prev_true_sensor, true_sensor)
        dist = float(np.linalg.norm(true_rel[:2, 3]))
        will_node = self.graph._pending_dist + dist >= slam.NODE_SPACING
        want_scan = self.t >= self._next_scan_t or will_node
        if want_scan:
            scan = sensors.simulate_scan(
                self.world, true_sensor, cfg.lidar, rng=self.rng, timestamp=self.t
            )
            if self.t >= self._next_scan_t:
                self._next_scan_t = self.t + SCAN_PERIOD
        drift_scale = sensors.drift_scale_at(
            self.world, self.robot.x, self.robot.y, cfg.odometry
        )
        noisy_rel = sensors.corrupt_odometry(
            true_rel, cfg.odometry, dist, self.rng, drift_scale=drift_scale
        )
        self.odom_pose = self.odom_pose @ noisy_rel
        self.prev_true_sensor = true_sensor
        self.odom_travel += dist

        new_node = slam.add_odometry_measurement(
            self.graph, noisy_rel, scan, dist, drift_model=cfg.odometry
        )
        if new_node is not None:
            self.odom_at_node[new_node] = self.odom_pose.copy()
            if (
                new_node % LOOP_CHECK_EVERY_NODES == 0
                and self.odom_travel - self.last_loop_travel >= LOOP_MIN_GAP_M
            ):
                accepted = slam.detect_loop_closures(
                    self.graph, new_node, radius_m=cfg.loop_radius,
                    drift_model=cfg.odometry,
                )
                if accepted:
                    self.pending_events.append("loop_closure")
                    slam.optimize_graph(self.graph)
                    self._store_revision()
                    self.pending_events.append("optimize")
                    self.last_loop_travel = self.odom_travel

        if scan is not None:
            est_sensor = self.est_sensor_pose()
            est_scan = sensors.ScanFrame(
                timestamp=self.t, sensor_pose=est_sensor, points=scan.points
            )
            slam.update_terrain_map(self.tmap, est_scan, self.est_robot_pose())
            self.payload_acc.add_scan(scan, self.odom_pose)
            if self._prior is not None:
                self._scan_counter += 1
                if self._scan_counter % reloc.SCAN_DECIMATION == 0:
                    desc = reloc.build_constellation(scan)
                    res = reloc.relocalize(
                        desc, self._prior, odom_pose_prior=self.odom_pose,
                        timestamp=self.t, odom_mark=self.odom_travel,
                    )
                    res.true_pose = true_sensor  # for offline evaluation
                    self.reloc_queries.append(res)
        self.payload_acc.add_travel(dist)
        self._maybe_process_payload()

        # planning fields at their own cadence
        if self.t - self._fields_t >= FIELD_PERIOD or self._fields is None:
            self._refresh_fields()
        trav, cost, sdf = self._fields

        est_robot = self.est_robot_pose()
        goal = self.mission.goal() if self.mission.status == "running" else None
        plan_res = autonomy.LocalPlanResult((0.0, 0.0, 0.0), stuck=False)
        if goal is not None:
            gcell = self._goal_cell(goal[:2], cost)
            if gcell is None:
                plan_res = autonomy.LocalPlanResult((0.0, 0.0, 0.0), stuck=True)
            else:
                key = (gcell, self._fields_t)
                if self._gdf_key != key:
                    try:
                        self._gdf = autonomy.compute_gdf(
                            cost, gcell, cfg.weights.obstacle_threshold, self.tmap.cell
                        )
                        self._gdf_key = key
                    except autonomy.PlanningError:
                        self._gdf = None
                if self._gdf is None:
                    plan_res = autonomy.LocalPlanResult((0.0, 0.0, 0.0), stuck=True)
                else:
                    plan_res = autonomy.local_plan_step(
                        sdf, self._gdf, est_robot, self.tmap.origin_xy(), self.tmap.cell
                    )
        # planner-level stuck drives replanning; a physically trapped robot
        # is the safety operator's problem (replans cannot free it)
        self.last_stuck = plan_res.stuck

        feedback = autonomy.PlannerFeedback(
            stuck=self.last_stuck,
            cost=cost,
            origin_xy=self.tmap.origin_xy(),
            cell=self.tmap.cell,
            obstacle_threshold=cfg.weights.obstacle_threshold,
        )
        autonomy.mission_step(
            self.mission, est_robot, feedback, TICK_DT, now=self.t,
            switch_radius=cfg.switch_radius,
        )

        if self.operator is not None:
            cmd = self.operator.update(self.t, self)
            if cmd is not None:
                self.operator_command(cmd)

        manual = self.mission.status == "manual-override"
        if manual:
            body_cmd = self.mission.manual_cmd
        elif self.mission.status == "running":
            body_cmd = plan_res.cmd
        else:
            body_cmd = (0.0, 0.0, 0.0)

        # log the pre-move state at t; step events surface on the next record
        new_events = [e[0] for e in self.mission.events[self._drained_events:]]
        self._drained_events = len(self.mission.events)
        tags = new_events + self.pending_events
        self.pending_events = []
        est = self.est_robot_pose()
        self.records.append(metrics.LogRecord(
            t=self.t,
            x=float(est[0, 3]),
            y=float(est[1, 3]),
            z=float(est[2, 3]),
            yaw=se3.yaw_of(est),
            source="operator" if manual else "autonomy",
            event="+".join(tags) if tags else None,
            status=self.mission.status,
        ))
        self.truth.append((self.t, self.robot.x, self.robot.y, self.robot.z,
                           self.robot.yaw))

        self.robot, events = sensors.step_robot(
            self.robot, body_cmd, TICK_DT, self.world, manual=manual
        )
        self.last_cmd = body_cmd
        self.pending_events.extend(events)
        self.position_history.append((self.robot.x, self.robot.y))

        self.t += TICK_DT
        if self.mission.status == "completed":
            self.exit_status = EXIT_COMPLETED
            return False
        if self.mission.status == "aborted":
            if self.exit_status != EXIT_TRAPPED:
                self.exit_status = EXIT_ABORTED
            return False
        if self.t >= self.config.max_sim_time_s:
            self.exit_status = EXIT_ABORTED
            return False
        return True

    def run(self):
        import time as wallclock

        rtf = self.config.real_time_factor
        while self.step():
            if math.isfinite(rtf) and rtf > 0:
                wallclock.sleep(TICK_DT / rtf)
        return export_artifacts(self)


# ---------------------------------------------------------------------------
# artifact export
# ---------------------------------------------------------------------------


def export_artifacts(runner):
    cfg = runner.config
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    payload_dir = os.path.join(out, "payloads")
    os.makedirs(payload_dir, exist_ok=True)

    log = metrics.MissionLog(records=runner.records, mission_id=cfg.mission_id)
    log_path = os.path.join(out, "mission_log.jsonl")
    metrics.save_mission_log(log, log_path)

    truth_path = os.path.join(out, "truth_track.jsonl")
    with open(truth_path, "w") as f:
        for t, x, y, z, yaw in runner.truth:
            f.write(json.dumps({
                "t": round(t, 6), "x": x, "y": y, "z": z, "yaw": yaw
            }, sort_keys=True) + "\n")

    graph_path = os.path.join(out, "pose_graph.g2o")
    slam.save_g2o(runner.graph, graph_path)

    rev_path = os.path.join(out, "revisions.jsonl")
    with open(rev_path, "w") as f:
        for rev in sorted(runner.revision_poses):
            poses = runner.revision_poses[rev]
            entry = {
                "revision": rev,
                "poses": {
                    str(nid): [float(v) for v in _pose_to_vec(p)]
                    for nid, p in sorted(poses.items())
                },
            }
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    index_path = os.path.join(out, "payloads.jsonl")
    with open(index_path, "w") as f:
        for payload, rev in runner.payloads:
            name = f"payload_{payload.payload_id:03d}.ply"
            write_ply(payload.points, os.path.join(payload_dir, name))
            f.write(json.dumps({
                "payload_id": payload.payload_id,
                "anchor_node_id": payload.anchor_node_id,
                "revision": rev,
                "window_dist": payload.window_dist,
                "timestamp": round(payload.timestamp, 6),
                "file": name,
            }, sort_keys=True) + "\n")

    rev, poses = runner.graph.snapshot()
    inv = runner.registry.build_inventory(
        poses, mission_id=cfg.mission_id, timestamp=runner.t,
        min_coverage_deg=cfg.min_coverage_deg,
    )
    runner.inventory_snapshot = inv
    inv_path = os.path.join(out, "inventory.csv")
    write_inventory_csv(inv, inv_path)

    gt_path = os.path.join(out, "ground_truth.csv")
    write_ground_truth_csv(worldmod.ground_truth_inventory(runner.world), gt_path)

    models = []
    for entry in sorted(runner.registry.entries, key=lambda e: e.tree_id):
        model = inventory.reconstruct(entry, poses,
                                      min_coverage_deg=cfg.min_coverage_deg)
        if model is not None:
            models.append(model)
    models_path = os.path.join(out, "models.txt")
    inventory.export_tree_models(models, models_path)

    events = metrics.aggregate_interventions(log)
    m = metrics.compute_autonomy_metrics(log, events)
    area = metrics.coverage_area(log.path_xy())
    metrics_path = os.path.join(out, "metrics.csv")
    metrics.write_metrics_csv([{
        "mission": cfg.mission_id,
        "time_s": m.total_time,
        "distance_m": m.total_distance,
        "interventions": m.intervention_count,
        "mdbi_m": m.mdbi,
        "mtbi_s": m.mtbi,
        "area_ha": area,
        "trees": len(inv),
    }], metrics_path)

    scene_path = os.path.join(out, "scene.json")
    worldmod.save_scene(runner.world, scene_path)

    config_path = os.path.join(out, "config.json")
    with open(config_path, "w") as f:
        json.dump(cfg.raw, f, indent=2, sort_keys=True)

    prior_path = None
    if cfg.reloc.get("build_prior"):
        positions = np.array([[r.x, r.y] for r in inv.records]).reshape(-1, 2)
        prior = reloc.build_prior_map(
            runner.graph, positions,
            sensor_height=cfg.reloc.get(
                "sensor_height", sensors.BODY_HEIGHT + cfg.lidar.mount_height
            ),
        )
        prior_path = os.path.join(out, "prior_map.txt")
        reloc.save_prior_map(prior, prior_path)

    return MissionArtifacts(
        out_dir=out,
        status=runner.exit_status or EXIT_ABORTED,
        mission_log=log_path,
        truth_track=truth_path,
        pose_graph=graph_path,
        revisions=rev_path,
        payload_dir=payload_dir,
        payload_index=index_path,
        inventory_csv=inv_path,
        ground_truth_csv=gt_path,
        metrics_csv=metrics_path,
        scene_json=scene_path,
        models_txt=models_path,
        config_json=config_path,
        prior_map=prior_path,
    )


def _pose_to_vec(pose):
    # rotation stored verbatim so replay reconstructs bit-identical poses
    return [*pose[:3, :3].ravel(), *pose[:3, 3]]


def _pose_from_vec(vec):
    return se3.make_pose(vec[9:12], np.asarray(vec[:9]).reshape(3, 3))


def run_mission(config):
    """Full headless mission; returns the artifact manifest."""
    if isinstance(config, dict):
        config = load_config(config)
    runner = MissionRunner(config)
    return runner.run()


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def replay(out_dir, recompute_inventory=True, mission_id=None):
    """Recompute metrics (and optionally the inventory) from stored artifacts.

    Outputs are byte-identical to the live run: metrics depend only on the
    log; the inventory replays the stored payloads against the recorded
    pose-graph revision snapshots.
    """
    log_path = os.path.join(out_dir, "mission_log.jsonl")
    log = metrics.load_mission_log(log_path, mission_id=mission_id or "")
    cfg_path = os.path.join(out_dir, "config.json")
    with open(cfg_path) as f:
        raw = json.load(f)
    mission_name = mission_id or raw.get("mission_id", f"seed-{raw.get('seed', 0)}")

    events = metrics.aggregate_interventions(log)
    m = metrics.compute_autonomy_metrics(log, events)
    area = metrics.coverage_area(log.path_xy())

    trees = None
    inv = None
    if recompute_inventory:
        revisions = {}
        with open(os.path.join(out_dir, "revisions.jsonl")) as f:
            for line in f:
                d = json.loads(line)
                revisions[d["revision"]] = {
                    int(nid): _pose_from_vec(vec) for nid, vec in d["poses"].items()
                }
        registry = inventory.TreeRegistry()
        from .pointcloud import read_ply

        with open(os.path.join(out_dir, "payloads.jsonl")) as f:
            payload_meta = [json.loads(line) for line in f if line.strip()]
        for meta in payload_meta:
            points = read_ply(os.path.join(out_dir, "payloads", meta["file"]))
            payload = slam.DataPayload(
                payload_id=meta["payload_id"],
                anchor_node_id=meta["anchor_node_id"],
                points=points,
                window_dist=meta["window_dist"],
                timestamp=meta["timestamp"],
            )
            snapshot = (meta["revision"], revisions[meta["revision"]])
            inventory.process_payload(payload, snapshot, registry)
        final_rev = max(revisions)
        min_cov = raw.get("inventory", {}).get(
            "min_coverage_deg", inventory.MIN_COVERAGE_DEG
        )
        inv = registry.build_inventory(
            revisions[final_rev], mission_id=mission_name,
            timestamp=log.records[-1].t if log.records else 0.0,
            min_coverage_deg=min_cov,
        )
        trees = len(inv)
    else:
        from .records import read_inventory_csv

        inv = read_inventory_csv(os.path.join(out_dir, "inventory.csv"))
        trees = len(inv)

    row = {
        "mission": mission_name,
        "time_s": m.total_time,
        "distance_m": m.total_distance,
        "interventions": m.intervention_count,
        "mdbi_m": m.mdbi,
        "mtbi_s": m.mtbi,
        "area_ha": area,
        "trees": trees,
    }
    return {"metrics_row": row, "metrics": m, "events": events, "inventory": inv}
