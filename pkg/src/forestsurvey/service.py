"""Mission control service: JSON frames over a websocket.

One process hosts the simulation (background thread) and the endpoint.
A single client may hold the controller role; any number of observers can
watch the stream. Frames follow schemas/protocol.schema.json; malformed or
conflicting frames are answered with error frames.
"""

import asyncio
import importlib.resources
import json
import math
import queue
import threading

import jsonschema
import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.staticfiles import StaticFiles

from . import autonomy, metrics, mission, se3

STREAM_PERIOD_S = 0.1  # <= 10 Hz
TRAIL_STRIDE = 5  # decimate the pose trail sent to clients


def _protocol_schema():
    ref = importlib.resources.files("forestsurvey.schemas").joinpath(
        "protocol.schema.json"
    )
    return json.loads(ref.read_text())


class MissionHost:
    """Owns the runner thread and mediates commands/snapshots."""

    def __init__(self, config):
        self.config = config
        self.runner = None
        self.thread = None
        self.commands = queue.Queue()
        self.lock = threading.Lock()
        self.area_override = None
        self.plan_preview = None
        self.started = False
        self.finished = False
        self.artifacts = None
        self._stop = threading.Event()

    # -- command handling (called from the event loop) --------------------

    def define_area(self, polygon, entry):
        if self.started:
            raise ValueError("mission already started; abort first")
        area = autonomy.SurveyArea(polygon=np.asarray(polygon, dtype=float),
                                   entry_pose=tuple(entry))
        plan = autonomy.plan_boustrophedon(
            area, self.config.row_spacing, self.config.waypoint_spacing
        )
        with self.lock:
            self.area_override = area
            self.plan_preview = plan
        return plan

    def start(self):
        if self.started:
            raise ValueError("mission already running")
        cfg = self.config
        if self.area_override is not None:
            raw = dict(cfg.raw)
            raw.setdefault("survey", {})
            raw["survey"] = {
                **raw.get("survey", {}),
                "polygon": [list(map(float, p)) for p in self.area_override.polygon],
                "entry": [float(v) for v in self.area_override.entry_pose],
            }
            cfg = mission.load_config(raw)
        self.runner = mission.MissionRunner(cfg, stream_inventory=True)
        self.started = True
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.thread.start()

    def operator_command(self, cmd):
        if not self.started or self.runner is None:
            raise ValueError("mission not running")
        self.commands.put(cmd)

    def _loop(self):
        import time as wallclock

        rtf = self.config.real_time_factor
        runner = self.runner
        while not self._stop.is_set():
            while True:
                try:
                    cmd = self.commands.get_nowait()
                except queue.Empty:
                    break
                try:
                    runner.operator_command(cmd)
                except autonomy.OperatorCommandError:
                    pass  # surfaced to clients via status stream
            with self.lock:
                alive = runner.step()
            if not alive:
                break
            if math.isfinite(rtf) and rtf > 0:
                wallclock.sleep(mission.TICK_DT / rtf)
        with self.lock:
            self.artifacts = mission.export_artifacts(runner)
            self.finished = True

    def shutdown(self):
        self._stop.set()
        if self.thread is not None:
            self.thread.join(timeout=5.0)

    # -- snapshots ---------------------------------------------------------

    def state_frame(self):
        with self.lock:
            if self.runner is None:
                return {
                    "type": "state",
                    "t": 0.0,
                    "pose": [0.0, 0.0, 0.0, 0.0],
                    "status": "idle",
                    "waypoint_index": 0,
                    "stuck": False,
                    "revision": 0,
                }
            r = self.runner
            est = r.est_robot_pose()
            trail = [
                [float(x), float(y)]
                for x, y in r.position_history[-600::TRAIL_STRIDE]
            ]
            return {
                "type": "state",
                "t": round(r.t, 3),
                "pose": [float(est[0, 3]), float(est[1, 3]), float(est[2, 3]),
                         se3.yaw_of(est)],
                "status": r.mission.status,
                "waypoint_index": int(r.mission.index),
                "stuck": bool(r.last_stuck or r.robot.trapped),
                "revision": int(r.graph.revision),
                "trail": trail,
            }

    def plan_frame(self):
        with self.lock:
            plan = self.plan_preview
            if plan is None and self.runner is not None:
                plan = self.runner.plan
        if plan is None:
            return None
        return {
            "type": "plan",
            "waypoints": [[float(v) for v in wp] for wp in plan.waypoints],
        }

    def metrics_frame(self):
        with self.lock:
            if self.runner is None or len(self.runner.records) < 2:
                return None
            log = metrics.MissionLog(records=list(self.runner.records))
            trees = (len(self.runner.inventory_snapshot)
                     if self.runner.inventory_snapshot else 0)
        events = metrics.aggregate_interventions(log)
        return {
            "type": "metrics",
            "time_s": round(log.total_time(), 1),
            "distance_m": round(log.total_distance(), 1),
            "interventions": len(events),
            "area_ha": round(metrics.coverage_area(log.path_xy()), 2),
            "trees": trees,
        }

    def terrain_frame(self):
        with self.lock:
            if self.runner is None:
                return None
            known = int(self.runner.tmap.known().sum())
            rough = self.runner.tmap.roughness()
        return {
            "type": "terrain",
            "known_cells": known,
            "mean_roughness": float(np.mean(rough)) if rough.size else 0.0,
        }

    def drain_tree_frames(self):
        with self.lock:
            if self.runner is None:
                return []
            fresh = list(self.runner.new_tree_records)
            self.runner.new_tree_records = []
        return [{
            "type": "tree",
            "record": {
                "id": int(r.tree_id),
                "x": float(r.x),
                "y": float(r.y),
                "dbh_m": float(r.dbh_m),
                "height_m": float(r.height_m),
                "coverage_deg": float(r.coverage_deg),
            },
        } for r in fresh]


def create_app(config, frontend_dir=None):
    app = FastAPI(title="forestsurvey mission service")
    host = MissionHost(config)
    app.state.host = host
    schema = _protocol_schema()
    client_schema = {
        "$schema": schema["$schema"],
        "definitions": schema["definitions"],
        "$ref": "#/definitions/client_frame",
    }
    roles = {"controller": None}

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        role = "observer"
        try:
            hello_raw = await ws.receive_text()
            try:
                hello = json.loads(hello_raw)
                jsonschema.validate(hello, client_schema)
            except (json.JSONDecodeError, jsonschema.ValidationError) as err:
                await ws.send_text(json.dumps(
                    {"type": "error", "message": f"bad hello: {err}"}
                ))
                await ws.close()
                return
            if hello.get("type") != "hello":
                await ws.send_text(json.dumps(
                    {"type": "error", "message": "expected a hello frame first"}
                ))
                await ws.close()
                return
            wanted = hello["role"]
            if wanted == "controller":
                if roles["controller"] is None:
                    roles["controller"] = id(ws)
                    role = "controller"
                else:
                    await ws.send_text(json.dumps({
                        "type": "error",
                        "message": "controller role already taken",
                    }))
            await ws.send_text(json.dumps({"type": "role", "role": role}))
            plan = host.plan_frame()
            if plan is not None:
                await ws.send_text(json.dumps(plan))

            async def sender():
                last_metrics = 0.0
                while True:
                    await ws.send_text(json.dumps(host.state_frame()))
                    for frame in host.drain_tree_frames():
                        await ws.send_text(json.dumps(frame))
                    now = asyncio.get_event_loop().time()
                    if now - last_metrics > 1.0:
                        for fr in (host.metrics_frame(), host.terrain_frame()):
                            if fr is not None:
                                await ws.send_text(json.dumps(fr))
                        last_metrics = now
                    await asyncio.sleep(STREAM_PERIOD_S)

            async def receiver():
                while True:
                    raw = await ws.receive_text()
                    try:
                        frame = json.loads(raw)
                        jsonschema.validate(frame, client_schema)
                    except (json.JSONDecodeError, jsonschema.ValidationError) as err:
                        await ws.send_text(json.dumps(
                            {"type": "error", "message": f"malformed frame: {err}"}
                        ))
                        continue
                    if role != "controller":
                        await ws.send_text(json.dumps(
                            {"type": "error",
                             "message": "observer connections cannot command"}
                        ))
                        continue
                    try:
                        await _handle_command(ws, host, frame)
                    except (ValueError, autonomy.OperatorCommandError,
                            autonomy.PlanningError) as err:
                        await ws.send_text(json.dumps(
                            {"type": "error", "message": str(err)}
                        ))

            recv_task = asyncio.create_task(receiver())
            send_task = asyncio.create_task(sender())
            done, pending = await asyncio.wait(
                {recv_task, send_task}, return_when=asyncio.FIRST_COMPLETED
            )
            for task in pending:
                task.cancel()
            for task in done:
                exc = task.exception()
                if exc is not None and not isinstance(
                    exc, (WebSocketDisconnect, RuntimeError)
                ):
                    raise exc
        except WebSocketDisconnect:
            pass
        finally:
            if roles["controller"] == id(ws):
                roles["controller"] = None

    if frontend_dir:
        app.mount("/", StaticFiles(directory=frontend_dir, html=True),
                  name="console")
    return app


async def _handle_command(ws, host, frame):
    kind = frame["type"]
    if kind == "define_area":
        plan = host.define_area(frame["polygon"], frame["entry"])
        await ws.send_text(json.dumps({
            "type": "plan",
            "waypoints": [[float(v) for v in wp] for wp in plan.waypoints],
        }))
    elif kind == "start":
        host.start()
        await ws.send_text(json.dumps(
            {"type": "event", "tag": "mission-started", "t": 0.0}
        ))
    elif kind == "pause":
        host.operator_command({"kind": "pause"})
    elif kind == "resume":
        host.operator_command({"kind": "resume", "goal": frame.get("goal")})
    elif kind == "manual_cmd":
        host.operator_command({
            "kind": "manual",
            "cmd": tuple(frame["cmd"]),
            "duration": frame.get("duration_s", 0.5),
        })
    elif kind == "abort":
        host.operator_command({"kind": "abort"})


def serve(config, port=8750, host_addr="127.0.0.1", frontend_dir=None):
    """Blocking uvicorn server hosting the mission service."""
    import uvicorn

    app = create_app(config, frontend_dir=frontend_dir)
    uvicorn.run(app, host=host_addr, port=port, log_level="warning")
