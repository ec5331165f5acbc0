"""Autonomy metrics from mission logs.

Operator records are merged into intervention events within a 10 s window;
the complement splits the mission into autonomous segments whose mean
length and duration give MDBI and MTBI:

    MDBI = (1/N) sum_i d_auto_i      MTBI = (1/N) sum_i t_auto_i

Coverage is the union of effective-range discs swept along the path.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import LineString, Point

INTERVENTION_WINDOW_S = 10.0
EFFECTIVE_RANGE_M = 15.0
BUFFER_QUAD_SEGS = 32  # ~1 m arc discretization at 15 m radius

DURATION_BIN_S = 5.0
DISTANCE_BIN_M = 1.0


@dataclass
class LogRecord:
    t: float
    x: float
    y: float
    z: float
    yaw: float
    source: str  # "autonomy" | "operator"
    event: str | None = None
    status: str | None = None

    def to_json(self):
        rec = {
            "t": round(float(self.t), 6),
            "x": float(self.x),
            "y": float(self.y),
            "z": float(self.z),
            "yaw": float(self.yaw),
            "source": self.source,
        }
        if self.event:
            rec["event"] = self.event
        if self.status:
            rec["status"] = self.status
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(
            t=d["t"], x=d["x"], y=d["y"], z=d["z"], yaw=d["yaw"],
            source=d["source"], event=d.get("event"), status=d.get("status"),
        )


@dataclass
class MissionLog:
    records: list
    mission_id: str = ""

    def __post_init__(self):
        times = [r.t for r in self.records]
        if any(b <= a for a, b in zip(times[:-1], times[1:])):
            raise ValueError("log timestamps must be strictly increasing")

    def path_xy(self):
        return np.array([(r.x, r.y) for r in self.records])

    def total_distance(self):
        p = self.path_xy()
        if len(p) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))

    def total_time(self):
        if len(self.records) < 2:
            return 0.0
        return float(self.records[-1].t - self.records[0].t)


def save_mission_log(log, path):
    with open(path, "w") as f:
        for r in log.records:
            f.write(r.to_json() + "\n")


def load_mission_log(path, mission_id=""):
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(LogRecord.from_json(line))
    return MissionLog(records=records, mission_id=mission_id)


@dataclass
class InterventionEvent:
    start: float
    end: float
    distance: float  # manual path length within [start, end)

    @property
    def duration(self):
        return self.end - self.start


@dataclass
class AutonomyMetrics:
    n_segments: int
    d_auto: list
    t_auto: list
    mdbi: float
    mtbi: float
    total_time: float
    total_distance: float
    intervention_count: int
    manual_distance: float


def aggregate_interventions(log, window_s=INTERVENTION_WINDOW_S):
    """Merge operator-sourced records into events within the time window.

    Each record covers [t_k, t_{k+1}); an event's distance is the path
    length of the record intervals it covers, autonomous gaps inside the
    merged window included.
    """
    records = log.records
    if len(records) < 2:
        return []
    op_idx = [k for k, r in enumerate(records) if r.source == "operator"]
    if not op_idx:
        return []
    bursts = []
    current = [op_idx[0]]
    for k in op_idx[1:]:
        if records[k].t - records[current[-1]].t < window_s:
            current.append(k)
        else:
            bursts.append(current)
            current = [k]
    bursts.append(current)

    events = []
    for burst in bursts:
        start = records[burst[0]].t
        last = burst[-1]
        end = records[last + 1].t if last + 1 < len(records) else records[last].t
        dist = 0.0
        for k in range(burst[0], min(last + 1, len(records) - 1)):
            dist += float(np.hypot(records[k + 1].x - records[k].x,
                                   records[k + 1].y - records[k].y))
        events.append(InterventionEvent(start=start, end=end, distance=dist))
    return events


def compute_autonomy_metrics(log, events):
    """Mean distance/time between interventions over autonomous segments."""
    records = log.records
    total_dist = log.total_distance()
    total_time = log.total_time()
    if not records:
        return AutonomyMetrics(0, [], [], 0.0, 0.0, 0.0, 0.0, 0, 0.0)

    def in_event(t):
        return any(e.start <= t < e.end for e in events)

    d_auto, t_auto = [], []
    manual_dist = 0.0
    seg_d = 0.0
    seg_t = 0.0
    open_seg = False
    for k in range(len(records) - 1):
        a, b = records[k], records[k + 1]
        step_d = float(np.hypot(b.x - a.x, b.y - a.y))
        step_t = float(b.t - a.t)
        if in_event(a.t):
            manual_dist += step_d
            if open_seg:
                d_auto.append(seg_d)
                t_auto.append(seg_t)
                seg_d = seg_t = 0.0
                open_seg = False
        else:
            seg_d += step_d
            seg_t += step_t
            open_seg = True
    if open_seg:
        d_auto.append(seg_d)
        t_auto.append(seg_t)

    # zero-length edge segments are dropped
    pairs = [(d, t) for d, t in zip(d_auto, t_auto) if t > 0.0]
    d_auto = [p[0] for p in pairs]
    t_auto = [p[1] for p in pairs]
    n = len(d_auto)
    return AutonomyMetrics(
        n_segments=n,
        d_auto=d_auto,
        t_auto=t_auto,
        mdbi=float(np.mean(d_auto)) if n else 0.0,
        mtbi=float(np.mean(t_auto)) if n else 0.0,
        total_time=total_time,
        total_distance=total_dist,
        intervention_count=len(events),
        manual_distance=manual_dist,
    )


@dataclass
class HistogramReport:
    duration_edges: np.ndarray
    duration_counts: np.ndarray
    distance_edges: np.ndarray
    distance_counts: np.ndarray
    tbi: list  # time gaps between events, per mission pooled
    dbi: list
    quantiles: dict
    notice: str = ""


def intervention_histograms(missions, duration_bin=DURATION_BIN_S,
                            distance_bin=DISTANCE_BIN_M):
    """Fixed-width histograms of event duration/distance + TBI/DBI pools.

    ``missions`` is a list of (log, events) pairs. TBI/DBI pool the interior
    autonomous gaps of missions that had at least one intervention; missions
    without interventions are excluded.
    """
    events_by_mission = [evs for _, evs in missions]
    all_events = [e for evs in events_by_mission for e in evs]
    if not all_events:
        return HistogramReport(
            duration_edges=np.array([0.0, duration_bin]),
            duration_counts=np.array([0]),
            distance_edges=np.array([0.0, distance_bin]),
            distance_counts=np.array([0]),
            tbi=[],
            dbi=[],
            quantiles={},
            notice="no intervention events; TBI/DBI plots skipped",
        )
    durations = np.array([e.duration for e in all_events])
    distances = np.array([e.distance for e in all_events])
    d_edges = np.arange(0.0, durations.max() + duration_bin, duration_bin)
    x_edges = np.arange(0.0, distances.max() + distance_bin, distance_bin)
    if len(d_edges) < 2:
        d_edges = np.array([0.0, duration_bin])
    if len(x_edges) < 2:
        x_edges = np.array([0.0, distance_bin])
    d_counts, _ = np.histogram(durations, bins=d_edges)
    x_counts, _ = np.histogram(distances, bins=x_edges)

    tbi, dbi = [], []
    for log, evs in missions:
        if len(evs) < 1:
            continue
        for a, b in zip(evs[:-1], evs[1:]):
            tbi.append(b.start - a.end)
            gap = [r for r in log.records if a.end <= r.t < b.start]
            if len(gap) >= 2:
                p = np.array([(r.x, r.y) for r in gap])
                dbi.append(float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1))))
            else:
                dbi.append(0.0)

    quantiles = {
        "duration_p50": float(np.median(durations)),
        "duration_p90": float(np.quantile(durations, 0.9)),
        "distance_p50": float(np.median(distances)),
        "distance_p90": float(np.quantile(distances, 0.9)),
    }
    return HistogramReport(
        duration_edges=d_edges,
        duration_counts=d_counts,
        distance_edges=x_edges,
        distance_counts=x_counts,
        tbi=tbi,
        dbi=dbi,
        quantiles=quantiles,
    )


def coverage_area(path, effective_range_m=EFFECTIVE_RANGE_M):
    """Hectares covered by the effective-range disc swept along the path."""
    path = np.atleast_2d(np.asarray(path, dtype=float))[:, :2]
    if len(path) == 0:
        return 0.0
    if len(path) == 1:
        geom = Point(path[0])
    else:
        # collapse duplicate consecutive vertices; LineString rejects them
        keep = np.r_[True, np.linalg.norm(np.diff(path, axis=0), axis=1) > 1e-9]
        pts = path[keep]
        geom = Point(pts[0]) if len(pts) == 1 else LineString(pts)
    area_m2 = geom.buffer(effective_range_m, quad_segs=BUFFER_QUAD_SEGS).area
    return float(area_m2) / 1e4


METRICS_HEADER = [
    "mission", "time_s", "distance_m", "interventions",
    "mdbi_m", "mtbi_s", "area_ha", "trees",
]


def write_metrics_csv(rows, path):
    """Table-style report: one row per mission."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([
                r["mission"],
                f"{r['time_s']:.1f}",
                f"{r['distance_m']:.1f}",
                r["interventions"],
                f"{r['mdbi_m']:.1f}",
                f"{r['mtbi_s']:.1f}",
                f"{r['area_ha']:.2f}",
                r["trees"],
            ])


def write_histogram_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(report.duration_edges[:-1], report.duration_edges[1:],
                             report.duration_counts):
            w.writerow(["duration_s", f"{lo:.1f}", f"{hi:.1f}", int(c)])
        for lo, hi, c in zip(report.distance_edges[:-1], report.distance_edges[1:],
                             report.distance_counts):
            w.writerow(["distance_m", f"{lo:.1f}", f"{hi:.1f}", int(c)])


def plot_histograms(report, out_dir):
    """Render duration/distance histograms (and TBI/DBI when present) to SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "forestsurvey"
    paths = []
    specs = [
        ("interventions_duration.svg", report.duration_edges,
         report.duration_counts, "intervention duration [s]"),
        ("interventions_distance.svg", report.distance_edges,
         report.distance_counts, "intervention distance [m]"),
    ]
    for name, edges, counts, label in specs:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
               edgecolor="black")
        ax.set_xlabel(label)
        ax.set_ylabel("count")
        fig.tight_layout()
        p = f"{out_dir}/{name}"
        fig.savefig(p, metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    if report.tbi:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.hist(report.tbi, bins=12, edgecolor="black")
        ax.set_xlabel("time between interventions [s]")
        ax.set_ylabel("count")
        fig.tight_layout()
        p = f"{out_dir}/time_between_interventions.svg"
        fig.savefig(p, metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    return paths
