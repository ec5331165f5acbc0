"""Pose-graph SLAM over simulated scans.

Nodes are dropped roughly every meter of odometric travel; loop closures are
proposed by proximity in the current estimate and verified with trimmed
point-to-point ICP. The graph is re-optimized in batch (Gauss-Newton with a
Levenberg fallback) whenever loop factors are accepted. Dense data payloads
accumulate ~20 m of scans in a gravity-aligned frame for the inventory
pipeline, and a robot-centered 2.5D terrain map feeds the local planner.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from . import accel, se3
from .pointcloud import voxel_downsample

NODE_SPACING = 1.0  # m of odometric travel between graph nodes
PAYLOAD_WINDOW = 20.0  # m of travel per dense payload
PAYLOAD_VOXEL = 0.02  # m
NODE_SCAN_VOXEL = 0.08  # m, scans stored on nodes are thinned for ICP

LOOP_RADIUS_DEFAULT = 12.0  # m, within the paper's 10-15 m band
LOOP_EXCLUDE_RECENT = 10  # newest nodes never match themselves
LOOP_MIN_FITNESS = 0.6
LOOP_MAX_RMSE = 0.1
LOOP_TRANS_INFO_BOOST = 10.0

ICP_TRIM_DIST = 0.5  # m correspondence cap
ICP_FITNESS_DIST = 0.1  # m inlier radius for the fitness score
ICP_MAX_ITER = 50
ICP_CONVERGENCE = 1e-4

MIN_TRANS_VAR = 1e-12  # variance floors keep zero-drift runs solvable
MIN_ROT_VAR = 1e-14
ICP_TRANS_VAR_FLOOR = 2.5e-5  # (5 mm)^2, realistic ICP alignment accuracy
ICP_ROT_VAR_FLOOR = 1e-5

TERRAIN_MAP_EXTENT = 4.0  # m
TERRAIN_MAP_CELL = 0.04  # m
TERRAIN_MAP_RING = 7  # recent hits kept per cell
TERRAIN_MAP_HEIGHT_BAND = 1.2  # m above ground considered for planning


@dataclass
class PoseGraphNode:
    node_id: int
    pose: np.ndarray  # SE(3) estimate, world frame
    scan: object  # ScanFrame
    odom_dist: float  # odometric distance from previous node
    scan_points: np.ndarray = None  # thinned points, node frame

    def __post_init__(self):
        if self.scan_points is None:
            pts = self.scan.points if self.scan is not None else np.zeros((0, 3))
            self.scan_points = voxel_downsample(pts, NODE_SCAN_VOXEL)


@dataclass
class GraphFactor:
    i: int
    j: int
    rel: np.ndarray  # measured pose of j in frame i
    info: np.ndarray  # diagonal information (tx ty tz rx ry rz)
    kind: str = "odom"  # "odom" | "loop"


@dataclass
class PoseGraph:
    nodes: list = field(default_factory=list)
    factors: list = field(default_factory=list)
    revision: int = 0
    # odometry buffered since the last node
    _pending_rel: np.ndarray = field(default_factory=lambda: np.eye(4))
    _pending_dist: float = 0.0
    _pending_info_var: float = 0.0

    @property
    def odometry_factors(self):
        return [f for f in self.factors if f.kind == "odom"]

    @property
    def loop_factors(self):
        return [f for f in self.factors if f.kind == "loop"]

    def poses(self):
        return [n.pose.copy() for n in self.nodes]

    def snapshot(self):
        """(revision, poses) pair readers may hold across optimizations."""
        return self.revision, {n.node_id: n.pose.copy() for n in self.nodes}


def start_graph(initial_pose, scan=None):
    g = PoseGraph()
    g.nodes.append(PoseGraphNode(node_id=0, pose=initial_pose.copy(), scan=scan, odom_dist=0.0))
    return g


def _odometry_info(dist, drift_model):
    d = max(dist, 1e-6)
    if drift_model is None:
        t_var = r_var = 0.0
    else:
        t_var = (drift_model.trans_drift**2) * d
        r_var = (drift_model.yaw_drift**2) * d
    t_info = 1.0 / max(t_var, MIN_TRANS_VAR)
    r_info = 1.0 / max(r_var, MIN_ROT_VAR)
    return np.array([t_info, t_info, t_info, r_info, r_info, r_info])


def add_odometry_measurement(graph, noisy_rel_pose, scan, dist, drift_model=None):
    """Buffer odometry; create a node when >= 1 m has accumulated.

    Returns the new node id, or None while still buffering.
    """
    if dist < 0:
        raise ValueError("odometric distance must be >= 0")
    graph._pending_rel = graph._pending_rel @ noisy_rel_pose
    graph._pending_dist += dist
    if graph._pending_dist < NODE_SPACING:
        return None
    prev = graph.nodes[-1]
    new_id = prev.node_id + 1
    pose = prev.pose @ graph._pending_rel
    node = PoseGraphNode(
        node_id=new_id, pose=pose, scan=scan, odom_dist=graph._pending_dist
    )
    graph.nodes.append(node)
    graph.factors.append(
        GraphFactor(
            i=prev.node_id,
            j=new_id,
            rel=graph._pending_rel.copy(),
            info=_odometry_info(graph._pending_dist, drift_model),
            kind="odom",
        )
    )
    graph._pending_rel = np.eye(4)
    graph._pending_dist = 0.0
    return new_id


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------


@dataclass
class ICPResult:
    ok: bool
    rel_pose: np.ndarray | None
    fitness: float
    rmse: float
    iterations: int
    message: str = ""


def _kabsch(src, dst):
    """Least-squares rigid transform mapping src onto dst."""
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    H = (src - c_src).T @ (dst - c_dst)
    U, S, Vt = np.linalg.svd(H)
    # degenerate spread: points nearly collinear/planar-degenerate
    if S[0] <= 1e-12 or S[1] / S[0] < 1e-9:
        return None
    D = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    t = c_dst - R @ c_src
    return se3.make_pose(t, R)


def icp_register(source, target, initial_guess=None, max_iter=ICP_MAX_ITER,
                 trim_dist=ICP_TRIM_DIST, fitness_dist=ICP_FITNESS_DIST,
                 convergence=ICP_CONVERGENCE):
    """Trimmed point-to-point ICP; returns pose mapping source into target.

    The correspondence cap starts loose and tightens to ``trim_dist`` so a
    meter-scale initial guess error still converges.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if len(source) < 50 or len(target) < 50:
        raise ValueError("ICP requires both clouds to hold at least 50 points")
    T = np.eye(4) if initial_guess is None else initial_guess.copy()
    tree = cKDTree(target)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if iterations <= 6:
            cap = 4.0 * trim_dist
        elif iterations <= 12:
            cap = 2.0 * trim_dist
        else:
            cap = trim_dist
        moved = se3.transform_points(T, source)
        dist, idx = tree.query(moved, k=1)
        keep = dist < cap
        if keep.sum() < 10:
            return ICPResult(False, None, 0.0, np.inf, iterations, "no correspondences")
        T_new = _kabsch(source[keep], target[idx[keep]])
        if T_new is None:
            return ICPResult(False, None, 0.0, np.inf, iterations, "degenerate geometry")
        delta_t = np.linalg.norm(T_new[:3, 3] - T[:3, 3])
        delta_r = np.linalg.norm(se3.log_so3(T_new[:3, :3].T @ T[:3, :3]))
        T = T_new
        if delta_t + delta_r < convergence:
            break
    moved = se3.transform_points(T, source)
    dist, _ = tree.query(moved, k=1)
    inlier = dist < fitness_dist
    fitness = float(inlier.mean())
    rmse = float(np.sqrt(np.mean(dist[inlier] ** 2))) if inlier.any() else np.inf
    return ICPResult(True, T, fitness, rmse, iterations)


# ---------------------------------------------------------------------------
# loop closures
# ---------------------------------------------------------------------------


def _loop_info(icp_rmse, drift_model):
    """Loop factor weights: ICP-accuracy based, capped at 10x a 1 m
    odometry factor's translation information."""
    odo = _odometry_info(NODE_SPACING, drift_model)
    t_info = 1.0 / max(icp_rmse**2, ICP_TRANS_VAR_FLOOR)
    r_info = 1.0 / max(icp_rmse**2, ICP_ROT_VAR_FLOOR)
    t_info = min(t_info, LOOP_TRANS_INFO_BOOST * odo[0])
    r_info = min(r_info, odo[3])
    return np.array([t_info, t_info, t_info, r_info, r_info, r_info])


def detect_loop_closures(graph, new_node_id, radius_m=LOOP_RADIUS_DEFAULT,
                         max_candidates=2, drift_model=None):
    """Verify proximity candidates with ICP; accepted factors join the graph."""
    if not 10.0 <= radius_m <= 15.0:
        raise ValueError("loop radius must lie in [10, 15] m")
    nodes = {n.node_id: n for n in graph.nodes}
    new = nodes[new_node_id]
    cand_ids = [
        n.node_id
        for n in graph.nodes
        if n.node_id <= new_node_id - LOOP_EXCLUDE_RECENT - 1
        and np.linalg.norm(n.pose[:2, 3] - new.pose[:2, 3]) <= radius_m
    ]
    cand_ids.sort(key=lambda i: np.linalg.norm(nodes[i].pose[:2, 3] - new.pose[:2, 3]))
    accepted = []
    for cid in cand_ids[:max_candidates]:
        cand = nodes[cid]
        local = []
        for nid in range(cid - 2, cid + 3):
            if nid in nodes and len(nodes[nid].scan_points):
                rel = se3.relative(cand.pose, nodes[nid].pose)
                local.append(se3.transform_points(rel, nodes[nid].scan_points))
        if not local:
            continue
        local_map = np.vstack(local)
        if len(local_map) < 50 or len(new.scan_points) < 50:
            continue
        guess = se3.relative(cand.pose, new.pose)
        result = icp_register(new.scan_points, local_map, initial_guess=guess,
                              max_iter=30)
        if not result.ok:
            continue
        if result.fitness >= LOOP_MIN_FITNESS and result.rmse <= LOOP_MAX_RMSE:
            assert result.fitness >= LOOP_MIN_FITNESS  # acceptance contract
            info = _loop_info(result.rmse, drift_model)
            factor = GraphFactor(i=cid, j=new_node_id, rel=result.rel_pose,
                                 info=info, kind="loop")
            graph.factors.append(factor)
            accepted.append(factor)
    return accepted


# ---------------------------------------------------------------------------
# batch optimization
# ---------------------------------------------------------------------------


@dataclass
class OptimizeResult:
    cost_before: float
    cost_after: float
    iterations: int
    converged: bool
    revision: int


def _residuals_pf(ti, tj, Ri, Rj, Zt, ZR):
    """Per-factor residuals: e = [t-part, log-rot-part] of Z^-1 (Xi^-1 Xj)."""
    RiT = np.transpose(Ri, (0, 2, 1))
    t_rel = np.einsum("nij,nj->ni", RiT, tj - ti)
    ZRT = np.transpose(ZR, (0, 2, 1))
    e_t = np.einsum("nij,nj->ni", ZRT, t_rel - Zt)
    e_r = se3.log_so3_batch(ZRT @ RiT @ Rj)
    return np.concatenate([e_t, e_r], axis=1)


def factor_cost(graph, kinds=("odom", "loop")):
    """Weighted squared residual cost of factors at current estimates."""
    if not graph.factors:
        return 0.0
    t, R, fi, fj, Zt, ZR, W = _pack_graph(graph)
    keep = np.array([f.kind in kinds for f in graph.factors])
    if not keep.any():
        return 0.0
    e = _residuals_pf(t[fi], t[fj], R[fi], R[fj], Zt, ZR)
    return float(np.sum((W * e * e)[keep]))


def _pack_graph(graph):
    id_to_idx = {n.node_id: k for k, n in enumerate(graph.nodes)}
    t = np.array([n.pose[:3, 3] for n in graph.nodes])
    R = np.array([n.pose[:3, :3] for n in graph.nodes])
    fi = np.array([id_to_idx[f.i] for f in graph.factors], dtype=np.int64)
    fj = np.array([id_to_idx[f.j] for f in graph.factors], dtype=np.int64)
    Zt = np.array([f.rel[:3, 3] for f in graph.factors])
    ZR = np.array([f.rel[:3, :3] for f in graph.factors])
    W = np.array([f.info for f in graph.factors])
    return t, R, fi, fj, Zt, ZR, W


def optimize_graph(graph, max_iter=100, tol=1e-8):
    """Gauss-Newton with Levenberg damping; first node fixed as gauge.

    Scans and payloads ride along rigidly since they live in node frames.
    """
    n = len(graph.nodes)
    if n < 2 or not graph.factors:
        graph.revision += 1
        return OptimizeResult(0.0, 0.0, 0, True, graph.revision)

    t, R, fi, fj, Zt, ZR, W = _pack_graph(graph)
    m = len(fi)

    def cost_of(tt, RR):
        e = _residuals_pf(tt[fi], tt[fj], RR[fi], RR[fj], Zt, ZR)
        return float(np.sum(W * e * e)), e

    def apply_step(tt, RR, delta):
        d = delta.reshape(n - 1, 6)
        t_new = tt.copy()
        R_new = RR.copy()
        t_new[1:] += d[:, :3]
        R_new[1:] = RR[1:] @ se3.exp_so3_batch(d[:, 3:])
        return t_new, R_new

    cost, e = cost_of(t, R)
    cost_before = cost
    eps = 1e-6
    lam = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        # numeric central-difference Jacobian, per-factor perturbed copies so
        # a node shared by several factors never cross-contaminates columns
        ti0, tj0 = t[fi], t[fj]
        Ri0, Rj0 = R[fi], R[fj]
        J = np.zeros((m, 6, 12))
        for k in range(6):
            for sgn in (1.0, -1.0):
                if k < 3:
                    dti = ti0.copy()
                    dti[:, k] += sgn * eps
                    ep_i = _residuals_pf(dti, tj0, Ri0, Rj0, Zt, ZR)
                    dtj = tj0.copy()
                    dtj[:, k] += sgn * eps
                    ep_j = _residuals_pf(ti0, dtj, Ri0, Rj0, Zt, ZR)
                else:
                    dw = np.zeros((m, 3))
                    dw[:, k - 3] = sgn * eps
                    dR = se3.exp_so3_batch(dw)
                    ep_i = _residuals_pf(ti0, tj0, Ri0 @ dR, Rj0, Zt, ZR)
                    ep_j = _residuals_pf(ti0, tj0, Ri0, Rj0 @ dR, Zt, ZR)
                J[:, :, k] += sgn * ep_i / (2 * eps)
                J[:, :, 6 + k] += sgn * ep_j / (2 * eps)

        JW = J * W[:, :, None]
        H_blocks = np.einsum("nab,nac->nbc", JW, J)
        b_blocks = -np.einsum("nab,na->nb", JW, e)

        rows, cols, vals = [], [], []
        bvec = np.zeros(6 * (n - 1))
        base = np.arange(6)
        for blk_i, idx_arr in ((0, fi), (1, fj)):
            for blk_j, idx_arr2 in ((0, fi), (1, fj)):
                sub = H_blocks[:, blk_i * 6 : blk_i * 6 + 6, blk_j * 6 : blk_j * 6 + 6]
                keep = (idx_arr > 0) & (idx_arr2 > 0)
                if not np.any(keep):
                    continue
                ri = ((idx_arr[keep] - 1)[:, None, None] * 6 + base[None, :, None])
                ci = ((idx_arr2[keep] - 1)[:, None, None] * 6 + base[None, None, :])
                rows.append(np.broadcast_to(ri, (keep.sum(), 6, 6)).ravel())
                cols.append(np.broadcast_to(ci, (keep.sum(), 6, 6)).ravel())
                vals.append(sub[keep].ravel())
        for blk, idx_arr in ((0, fi), (1, fj)):
            keep = idx_arr > 0
            np.add.at(
                bvec.reshape(n - 1, 6),
                idx_arr[keep] - 1,
                b_blocks[keep, blk * 6 : blk * 6 + 6],
            )
        H = coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(6 * (n - 1), 6 * (n - 1)),
        ).tocsc()

        improved = False
        for _ in range(8):
            damped = H + csr_matrix(
                (np.full(H.shape[0], lam), (np.arange(H.shape[0]), np.arange(H.shape[0]))),
                shape=H.shape,
            ) if lam > 0 else H
            try:
                delta = spsolve(damped.tocsc(), bvec)
            except Exception:
                lam = max(lam * 10.0, 1e-6)
                continue
            if not np.all(np.isfinite(delta)):
                lam = max(lam * 10.0, 1e-6)
                continue
            t_try, R_try = apply_step(t, R, delta)
            cost_try, e_try = cost_of(t_try, R_try)
            if cost_try <= cost:
                t, R, = t_try, R_try
                improvement = cost - cost_try
                cost, e = cost_try, e_try
                lam = lam / 3.0 if lam > 1e-9 else 0.0
                improved = True
                break
            lam = max(lam * 10.0, 1e-6)
        if not improved:
            break
        if improvement < tol:
            converged = True
            break

    for k, node in enumerate(graph.nodes):
        node.pose = se3.make_pose(t[k], R[k])
    graph.revision += 1
    return OptimizeResult(cost_before, cost, iterations, converged, graph.revision)


# ---------------------------------------------------------------------------
# data payloads
# ---------------------------------------------------------------------------


@dataclass
class DataPayload:
    payload_id: int
    anchor_node_id: int
    points: np.ndarray  # gravity-aligned anchor-local frame
    window_dist: float
    timestamp: float


class PayloadAccumulator:
    """Collects scans over ~20 m of travel into gravity-aligned payloads."""

    def __init__(self, window=PAYLOAD_WINDOW, voxel=PAYLOAD_VOXEL):
        self.window = window
        self.voxel = voxel
        self._scans = []  # (odom sensor pose, points sensor frame, timestamp)
        self._travel = 0.0
        self._count = 0

    def add_scan(self, scan, odom_pose):
        self._scans.append((odom_pose.copy(), scan.points, scan.timestamp))

    def add_travel(self, dist):
        self._travel += dist

    def maybe_emit(self, anchor_node_id, anchor_odom_pose):
        """Emit a payload once a full window of travel has accumulated."""
        if self._travel < self.window or not self._scans:
            return None
        anchor = se3.yaw_aligned(anchor_odom_pose)
        inv_anchor = se3.inverse(anchor)
        clouds = []
        for pose, pts, _ in self._scans:
            rel = inv_anchor @ pose
            clouds.append(se3.transform_points(rel, pts))
        points = voxel_downsample(np.vstack(clouds), self.voxel)
        # payloads persist as float32 PLY; quantize now so a replay from
        # disk consumes bit-identical data
        points = points.astype("<f4").astype(np.float64)
        payload = DataPayload(
            payload_id=self._count,
            anchor_node_id=anchor_node_id,
            points=points,
            window_dist=self._travel,
            timestamp=self._scans[-1][2],
        )
        self._count += 1
        self._scans = []
        self._travel = 0.0
        return payload


def payload_world_points(payload, graph_poses):
    """Express a payload in the world through its anchor's current pose."""
    anchor = se3.yaw_aligned(graph_poses[payload.anchor_node_id])
    return se3.transform_points(anchor, payload.points)


# ---------------------------------------------------------------------------
# local terrain map
# ---------------------------------------------------------------------------


class LocalTerrainMap:
    """Robot-centered 2.5D grid (4 m x 4 m, 4 cm cells) of recent hits."""

    def __init__(self, extent=TERRAIN_MAP_EXTENT, cell=TERRAIN_MAP_CELL):
        self.cell = cell
        self.size = int(round(extent / cell))
        self.ring = np.zeros((self.size, self.size, TERRAIN_MAP_RING))
        self.count = np.zeros((self.size, self.size), dtype=np.int64)
        self.head = np.zeros((self.size, self.size), dtype=np.int64)
        self.center_cell = None  # (ci, cj) world cell of the map center

    def copy(self):
        out = LocalTerrainMap(self.size * self.cell, self.cell)
        out.ring = self.ring.copy()
        out.count = self.count.copy()
        out.head = self.head.copy()
        out.center_cell = self.center_cell
        return out

    def origin_xy(self):
        ci, cj = self.center_cell
        half = self.size // 2
        return ((cj - half) * self.cell, (ci - half) * self.cell)

    def recenter(self, x, y):
        ci = int(np.floor(y / self.cell))
        cj = int(np.floor(x / self.cell))
        if self.center_cell is None:
            self.center_cell = (ci, cj)
            return
        di = ci - self.center_cell[0]
        dj = cj - self.center_cell[1]
        if di == 0 and dj == 0:
            return
        self.ring = _shift2(self.ring, di, dj)
        self.count = _shift2(self.count, di, dj)
        self.head = _shift2(self.head, di, dj)
        self.center_cell = (ci, cj)

    def ingest(self, points_world, robot_z):
        """Scatter points into cells; canopy hits above the band are ignored."""
        if len(points_world) == 0:
            return
        x0, y0 = self.origin_xy()
        keep = points_world[:, 2] <= robot_z + TERRAIN_MAP_HEIGHT_BAND
        pts = points_world[keep]
        jj = np.floor((pts[:, 0] - x0) / self.cell).astype(np.int64)
        ii = np.floor((pts[:, 1] - y0) / self.cell).astype(np.int64)
        ok = (ii >= 0) & (ii < self.size) & (jj >= 0) & (jj < self.size)
        accel.scatter_hits(ii[ok], jj[ok], pts[ok, 2], self.ring, self.count, self.head)

    def known(self):
        return self.count > 0

    def elevation(self):
        """Per-cell median of the retained hits; NaN where unknown."""
        out = np.full((self.size, self.size), np.nan)
        known = self.count > 0
        full = self.count >= TERRAIN_MAP_RING
        if np.any(full):
            out[full] = np.median(self.ring[full], axis=-1)
        partial = known & ~full
        for cnt in np.unique(self.count[partial]):
            sel = partial & (self.count == cnt)
            ii, jj = np.nonzero(sel)
            idx = (self.head[ii, jj][:, None] - cnt + np.arange(cnt)[None, :]) \
                % TERRAIN_MAP_RING
            vals = self.ring[ii[:, None], jj[:, None], idx]
            out[sel] = np.median(vals, axis=1)
        return out

    def roughness(self):
        """3x3 neighborhood stddev of elevations; 0 where under-observed."""
        elev = self.elevation()
        known = np.isfinite(elev)
        s = self.size
        acc = np.zeros((s, s))
        acc2 = np.zeros((s, s))
        cnt = np.zeros((s, s))
        padded = np.pad(elev, 1, constant_values=np.nan)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                win = padded[1 + di : 1 + di + s, 1 + dj : 1 + dj + s]
                ok = np.isfinite(win)
                acc += np.where(ok, win, 0.0)
                acc2 += np.where(ok, win * win, 0.0)
                cnt += ok
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = acc / cnt
            var = np.maximum(acc2 / cnt - mean * mean, 0.0)
        rough = np.where((cnt >= 3) & known, np.sqrt(var), 0.0)
        return np.where(known, rough, 0.0)


def _shift2(arr, di, dj):
    out = np.zeros_like(arr)
    src_i = slice(max(di, 0), arr.shape[0] + min(di, 0))
    dst_i = slice(max(-di, 0), arr.shape[0] + min(-di, 0))
    src_j = slice(max(dj, 0), arr.shape[1] + min(dj, 0))
    dst_j = slice(max(-dj, 0), arr.shape[1] + min(-dj, 0))
    out[dst_i, dst_j] = arr[src_i, src_j]
    return out


def update_terrain_map(tmap, scan, robot_pose):
    """Recenter on the robot, then fold the scan's world points in."""
    tmap.recenter(robot_pose[0, 3], robot_pose[1, 3])
    tmap.ingest(scan.points_world(), robot_pose[2, 3])
    return tmap


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _quat_from_matrix(R):
    """(w, x, y, z) from a rotation matrix, Shepperd's method."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        return np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                         (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    k = int(np.argmax(np.diag(R)))
    if k == 0:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        return np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                         (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    if k == 1:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        return np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                         0.25 * s, (R[1, 2] + R[2, 1]) / s])
    s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
    return np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                     (R[1, 2] + R[2, 1]) / s, 0.25 * s])


def _matrix_from_quat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def save_g2o(graph, path):
    """Plain-text graph: VERTEX_SE3 / EDGE_SE3 records (see README)."""
    with open(path, "w") as f:
        for node in graph.nodes:
            q = [float(v) for v in _quat_from_matrix(node.pose[:3, :3])]
            t = [float(v) for v in node.pose[:3, 3]]
            f.write(
                f"VERTEX_SE3 {node.node_id} {t[0]!r} {t[1]!r} {t[2]!r} "
                f"{q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r}\n"
            )
        for fac in graph.factors:
            q = [float(v) for v in _quat_from_matrix(fac.rel[:3, :3])]
            t = [float(v) for v in fac.rel[:3, 3]]
            info = " ".join(repr(float(v)) for v in fac.info)
            f.write(
                f"EDGE_SE3 {fac.i} {fac.j} {t[0]!r} {t[1]!r} {t[2]!r} "
                f"{q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r} {info} {fac.kind}\n"
            )


def load_g2o(path):
    graph = PoseGraph()
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "VERTEX_SE3":
                nid = int(parts[1])
                t = [float(v) for v in parts[2:5]]
                q = [float(v) for v in parts[5:9]]
                pose = se3.make_pose(t, _matrix_from_quat(q))
                graph.nodes.append(
                    PoseGraphNode(node_id=nid, pose=pose, scan=None, odom_dist=0.0,
                                  scan_points=np.zeros((0, 3)))
                )
            elif parts[0] == "EDGE_SE3":
                i, j = int(parts[1]), int(parts[2])
                t = [float(v) for v in parts[3:6]]
                q = [float(v) for v in parts[6:10]]
                info = np.array([float(v) for v in parts[10:16]])
                kind = parts[16] if len(parts) > 16 else "odom"
                graph.factors.append(
                    GraphFactor(i=i, j=j, rel=se3.make_pose(t, _matrix_from_quat(q)),
                                info=info, kind=kind)
                )
    return graph


def dump_terrain_csv(tmap, path):
    elev = tmap.elevation()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["i", "j", "elevation_m", "roughness_m"])
        rough = tmap.roughness()
        for i in range(tmap.size):
            for j in range(tmap.size):
                if tmap.count[i, j] > 0:
                    w.writerow([i, j, repr(float(elev[i, j])), repr(float(rough[i, j]))])
