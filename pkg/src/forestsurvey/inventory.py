"""Online forest inventory over dense payload clouds.

Per payload: drape a simulated cloth over the inverted cloud to get a
terrain model, slice the normalized cloud where foliage is not expected,
cluster stems by Voronoi adjacency, and refine with a cylinder fit. Tree
candidates aggregate across payloads through the pose graph so stems seen
from several sides accumulate angular coverage; once a stem passes the
coverage gate its trunk is rebuilt as stacked oblique cone frustums and the
diameter at breast height is interpolated from the circle fits.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from . import se3
from .records import Inventory, TreeRecord

CSF_CELL = 0.5  # m cloth grid spacing
CSF_GRAVITY_STEP = 0.1  # m per iteration
CSF_MAX_ITER = 500
CSF_EPS = 1e-3  # rest displacement
CSF_SPRING_ALPHA = 0.65
CSF_SPRING_PASSES = 3
CSF_GROUND_DIST = 0.2  # m, points this close to the cloth are ground
CSF_MIN_POINTS = 1000

SLICE_LO = 0.5  # m above terrain, below expected foliage
SLICE_HI = 4.0
VORONOI_LINKAGE = 0.3  # m
CYL_SURFACE_TOL = 0.1  # m
MIN_CLUSTER_POINTS = 50
RADIUS_RANGE = (0.025, 1.0)  # m
MAX_AXIS_TILT_DEG = 15.0

MERGE_RADIUS = 0.5  # m between axis footprints of the same tree
COVERAGE_BIN_DEG = 5.0
MIN_COVERAGE_DEG = 90.0

RECON_BIN = 0.5  # m height bins for circle fitting
RECON_MIN_BIN_POINTS = 20
RECON_MAX_RMSE = 0.05  # m
COARSE_TOP_RADIUS = 0.075  # m; thicker tops mean the stem kept going


@dataclass
class TerrainModel:
    heights: np.ndarray  # (ny, nx) ground height, world z
    valid: np.ndarray  # bool mask
    origin: tuple  # (x0, y0) of cell (0, 0) center
    cell: float = CSF_CELL

    def height_at(self, x, y):
        """Bilinear over valid cells; falls back to nearest valid cell."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        ny, nx = self.heights.shape
        gx = np.clip((x - self.origin[0]) / self.cell, 0.0, nx - 1.000001)
        gy = np.clip((y - self.origin[1]) / self.cell, 0.0, ny - 1.000001)
        j = gx.astype(int)
        i = gy.astype(int)
        fx = gx - j
        fy = gy - i
        h = self.heights
        v = self.valid
        vals = np.empty((len(x), 4))
        ok = np.empty((len(x), 4), dtype=bool)
        for k, (di, dj, wgt) in enumerate((
            (0, 0, (1 - fx) * (1 - fy)),
            (0, 1, fx * (1 - fy)),
            (1, 0, (1 - fx) * fy),
            (1, 1, fx * fy),
        )):
            vals[:, k] = h[i + di, j + dj]
            ok[:, k] = v[i + di, j + dj]
        weights = np.stack([
            (1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy
        ], axis=1)
        weights = np.where(ok, weights, 0.0)
        total = weights.sum(axis=1)
        out = np.where(
            total > 1e-9,
            (vals * weights).sum(axis=1) / np.maximum(total, 1e-9),
            np.nan,
        )
        missing = ~np.isfinite(out)
        if np.any(missing):
            vi, vj = np.nonzero(v)
            if len(vi):
                cx = self.origin[0] + vj * self.cell
                cy = self.origin[1] + vi * self.cell
                for idx in np.flatnonzero(missing):
                    k = np.argmin((cx - x[idx]) ** 2 + (cy - y[idx]) ** 2)
                    out[idx] = h[vi[k], vj[k]]
        return out if out.size > 1 else float(out[0])


def extract_terrain_csf(points, cell=CSF_CELL, max_iter=CSF_MAX_ITER,
                        eps=CSF_EPS):
    """Cloth-simulation ground extraction; None when the cloud is too thin."""
    points = np.asarray(points, dtype=float)
    if len(points) < CSF_MIN_POINTS:
        return None
    x0 = points[:, 0].min() - cell
    y0 = points[:, 1].min() - cell
    nx = int(np.ceil((points[:, 0].max() - x0) / cell)) + 2
    ny = int(np.ceil((points[:, 1].max() - y0) / cell)) + 2

    # inverted cloud: cloth falls in -z' onto floor = max(-z) per cell
    jj = np.clip(((points[:, 0] - x0) / cell).round().astype(int), 0, nx - 1)
    ii = np.clip(((points[:, 1] - y0) / cell).round().astype(int), 0, ny - 1)
    floor = np.full((ny, nx), -np.inf)
    np.maximum.at(floor, (ii, jj), -points[:, 2])
    has_floor = np.isfinite(floor)

    cloth = np.full((ny, nx), float(-points[:, 2].min() + 1.0))
    movable = np.ones((ny, nx), dtype=bool)
    for _ in range(max_iter):
        prev = cloth.copy()
        cloth = np.where(movable, cloth - CSF_GRAVITY_STEP, cloth)
        hit = movable & has_floor & (cloth <= floor)
        cloth = np.where(hit, floor, cloth)
        movable = movable & ~hit
        for _ in range(CSF_SPRING_PASSES):
            padded = np.pad(cloth, 1, mode="edge")
            neigh = (
                padded[:-2, 1:-1] + padded[2:, 1:-1]
                + padded[1:-1, :-2] + padded[1:-1, 2:]
            ) / 4.0
            cloth = np.where(movable, cloth + CSF_SPRING_ALPHA * (neigh - cloth), cloth)
            hit = movable & has_floor & (cloth <= floor)
            cloth = np.where(hit, floor, cloth)
            movable = movable & ~hit
        if float(np.max(np.abs(cloth - prev))) < eps:
            break

    heights = -cloth
    # only cells with returns are trusted; dataless cloth cells sag
    return TerrainModel(heights=heights, valid=has_floor, origin=(x0, y0), cell=cell)


def classify_ground(points, terrain):
    """Mask of points within the ground band of the settled cloth."""
    points = np.asarray(points, dtype=float)
    ground = terrain.height_at(points[:, 0], points[:, 1])
    return np.abs(points[:, 2] - ground) <= CSF_GROUND_DIST


# ---------------------------------------------------------------------------
# circle fitting
# ---------------------------------------------------------------------------


def fit_circle(points):
    """Algebraic least-squares init + geometric Gauss-Newton refinement.

    Returns (center (2,), radius, rmse). Raises on collinear input.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise ValueError("circle fit needs at least 3 points")
    x, y = pts[:, 0], pts[:, 1]
    A = np.column_stack([2 * x, 2 * y, np.ones(len(pts))])
    b = x * x + y * y
    AtA = A.T @ A
    if np.linalg.cond(AtA) > 1e12:
        raise ValueError("collinear points")
    cx, cy, c = np.linalg.solve(AtA, A.T @ b)
    r = float(np.sqrt(max(c + cx * cx + cy * cy, 1e-18)))
    center = np.array([cx, cy])

    for _ in range(12):
        d = np.hypot(x - center[0], y - center[1])
        d = np.maximum(d, 1e-12)
        res = d - r
        J = np.column_stack([-(x - center[0]) / d, -(y - center[1]) / d,
                             -np.ones(len(pts))])
        g = J.T @ res
        H = J.T @ J
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        center = center + step[:2]
        r = float(r + step[2])
        if np.linalg.norm(step) < 1e-11:
            break
    d = np.hypot(x - center[0], y - center[1])
    rmse = float(np.sqrt(np.mean((d - r) ** 2)))
    return center, float(r), rmse


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


@dataclass
class TreeCandidate:
    points: np.ndarray  # world frame at segmentation time
    axis_xy: tuple  # stem axis footprint on the ground, world
    ground_z: float
    payload_id: int
    node_id: int = -1


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, a):
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _voronoi_clusters(xy, linkage=VORONOI_LINKAGE, quant=0.01):
    """Connected components over Delaunay edges shorter than the linkage.

    Stacked stem rings project to coincident 2D points, which Qhull would
    merge silently; clustering runs on quantized unique positions and the
    labels map back to every input point.
    """
    if len(xy) == 0:
        return []
    keys = np.round(np.asarray(xy) / quant).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    rep = uniq * quant
    n = len(rep)
    uf = _UnionFind(n)
    if n >= 4:
        try:
            tri = Delaunay(rep)
            indptr, indices = tri.vertex_neighbor_vertices
            for a in range(n):
                for b in indices[indptr[a]:indptr[a + 1]]:
                    if a < b and np.hypot(*(rep[a] - rep[b])) <= linkage:
                        uf.union(a, b)
        except Exception:  # degenerate input (collinear); brute-force linkage
            _linkage_brute(rep, uf, linkage)
    else:
        _linkage_brute(rep, uf, linkage)
    rep_root = np.array([uf.find(k) for k in range(n)])
    roots = rep_root[inverse]
    return [np.flatnonzero(roots == r) for r in np.unique(roots)]


def _linkage_brute(rep, uf, linkage):
    for a in range(len(rep)):
        d = np.hypot(rep[:, 0] - rep[a, 0], rep[:, 1] - rep[a, 1])
        for b in np.flatnonzero(d <= linkage):
            if b > a:
                uf.union(a, int(b))


def _bin_circle_centers(pts, z_norm, bin_size=RECON_BIN, min_points=12):
    """Circle center per z bin; used for axis estimation."""
    bins = np.floor(z_norm / bin_size).astype(int)
    centers = []
    for b in np.unique(bins):
        sel = bins == b
        if sel.sum() < min_points:
            continue
        try:
            center, r, rmse = fit_circle(pts[sel, :2])
        except ValueError:
            continue
        if rmse > 2 * RECON_MAX_RMSE:
            continue
        centers.append(((b + 0.5) * bin_size, center[0], center[1], r))
    return centers


def _fit_axis(centers):
    """Least-squares line x(z), y(z) through (z, cx, cy) samples."""
    z = np.array([c[0] for c in centers])
    cx = np.array([c[1] for c in centers])
    cy = np.array([c[2] for c in centers])
    if len(z) == 1 or np.ptp(z) < 1e-9:
        return (cx[0], 0.0, cy[0], 0.0, z[0])
    A = np.column_stack([np.ones(len(z)), z - z[0]])
    sx, mx = np.linalg.lstsq(A, cx, rcond=None)[0]
    sy, my = np.linalg.lstsq(A, cy, rcond=None)[0]
    return (sx, mx, sy, my, z[0])


def _axis_xy_at(axis, z):
    sx, mx, sy, my, z0 = axis
    return sx + mx * (z - z0), sy + my * (z - z0)


def segment_trees(points, terrain, payload_id=0, min_points=MIN_CLUSTER_POINTS):
    """Stem candidates from a payload cloud and its terrain model.

    ``min_points`` gates cluster size; single-scan callers lower it.
    """
    if terrain is None:
        raise ValueError("terrain model required")
    points = np.asarray(points, dtype=float)
    ground = terrain.height_at(points[:, 0], points[:, 1])
    z_norm = points[:, 2] - ground
    in_slice = (z_norm >= SLICE_LO) & (z_norm <= SLICE_HI)
    slice_pts = points[in_slice]
    slice_z = z_norm[in_slice]
    if len(slice_pts) < min_points:
        return []
    # z-sorted views let the stem-tracking walk slice bands cheaply
    z_order = np.argsort(z_norm, kind="stable")
    pts_by_z = points[z_order]
    z_sorted = z_norm[z_order]

    bin_min = max(6, min_points // 4)
    candidates = []
    for idx in _voronoi_clusters(slice_pts[:, :2]):
        if len(idx) < min_points:
            continue
        cpts = slice_pts[idx]
        cz = slice_z[idx]
        centers = _bin_circle_centers(cpts, cz, min_points=bin_min)
        if len(centers) < 2:
            continue
        axis = _fit_axis(centers)
        tilt = np.hypot(axis[1], axis[3])  #|d(xy)/dz|
        if np.rad2deg(np.arctan(tilt)) > MAX_AXIS_TILT_DEG:
            continue
        radius = float(np.median([c[3] for c in centers]))
        if not RADIUS_RANGE[0] <= radius <= RADIUS_RANGE[1]:
            continue
        ax, ay = _axis_xy_at(axis, cz)
        dist = np.hypot(cpts[:, 0] - ax, cpts[:, 1] - ay)
        keep = np.abs(dist - radius) <= CYL_SURFACE_TOL
        if keep.sum() < min_points:
            continue
        refined = cpts[keep]
        refined_z = cz[keep]

        # walk the stem beyond the slice, tracking the leaning axis
        full = [refined]
        centers_all = list(centers)
        for direction in (1.0, -1.0):
            if direction > 0:
                b = int(np.floor(refined_z.max() / RECON_BIN)) + 1
            else:
                b = int(np.floor(refined_z.min() / RECON_BIN)) - 1
            misses = 0
            while misses < 2:
                z_lo, z_hi = b * RECON_BIN, (b + 1) * RECON_BIN
                if direction < 0 and z_lo < 0.3:
                    break  # ground-contact band would contaminate the fit
                zc = (z_lo + z_hi) / 2.0
                axis_now = _fit_axis(centers_all)
                px, py = _axis_xy_at(axis_now, zc)
                a = np.searchsorted(z_sorted, z_lo)
                bnd = np.searchsorted(z_sorted, z_hi)
                band_pts = pts_by_z[a:bnd]
                if len(band_pts):
                    d = np.hypot(band_pts[:, 0] - px, band_pts[:, 1] - py)
                    near = d <= max(2.5 * radius, 0.35)
                else:
                    near = np.zeros(0, dtype=bool)
                if near.sum() >= 8:
                    seg = band_pts[near]
                    full.append(seg)
                    try:
                        center, r, rmse = fit_circle(seg[:, :2])
                        if (rmse <= 2 * RECON_MAX_RMSE
                                and 0.4 * radius <= r <= 2.0 * radius):
                            centers_all.append((zc, center[0], center[1], r))
                            centers_all.sort(key=lambda c: c[0])
                    except ValueError:
                        pass
                    misses = 0
                else:
                    misses += 1
                b += int(direction)

        cloud = np.vstack(full)
        axis_final = _fit_axis(centers_all)
        gx, gy = _axis_xy_at(axis_final, 0.0)
        gz = float(terrain.height_at(gx, gy))
        candidates.append(
            TreeCandidate(
                points=cloud,
                axis_xy=(float(gx), float(gy)),
                ground_z=gz,
                payload_id=payload_id,
            )
        )
    candidates.sort(key=lambda c: (c.axis_xy[0], c.axis_xy[1]))
    return candidates


# ---------------------------------------------------------------------------
# spatio-temporal aggregation
# ---------------------------------------------------------------------------

_N_BINS = int(round(360.0 / COVERAGE_BIN_DEG))


@dataclass
class TreeEntry:
    tree_id: int
    contributions: list  # (node_id, points in node frame, payload_id)
    bins: np.ndarray  # angular coverage bins
    axis_xy: tuple
    ground_z: float

    def coverage_deg(self):
        return float(self.bins.sum() * COVERAGE_BIN_DEG)

    def world_points(self, poses):
        return np.vstack([
            se3.transform_points(poses[nid], pts)
            for nid, pts, _ in self.contributions
        ])


class GlobalTerrain:
    """Running per-cell mean of payload terrain models (0.5 m cells)."""

    def __init__(self, cell=CSF_CELL):
        self.cell = cell
        self.sums = {}
        self.counts = {}

    def update(self, terrain):
        vi, vj = np.nonzero(terrain.valid)
        xs = terrain.origin[0] + vj * terrain.cell
        ys = terrain.origin[1] + vi * terrain.cell
        hs = terrain.heights[vi, vj]
        for x, y, h in zip(xs, ys, hs):
            key = (int(np.floor(x / self.cell)), int(np.floor(y / self.cell)))
            self.sums[key] = self.sums.get(key, 0.0) + float(h)
            self.counts[key] = self.counts.get(key, 0) + 1

    def height_at(self, x, y):
        key = (int(np.floor(x / self.cell)), int(np.floor(y / self.cell)))
        if key in self.sums:
            return self.sums[key] / self.counts[key]
        if not self.sums:
            return 0.0
        keys = np.array(list(self.sums.keys()))
        d = (keys[:, 0] - key[0]) ** 2 + (keys[:, 1] - key[1]) ** 2
        k = tuple(keys[int(np.argmin(d))])
        return self.sums[k] / self.counts[k]


class TreeRegistry:
    """Merged tree identities across payloads, tied to pose-graph nodes."""

    def __init__(self):
        self.entries = []
        self.terrain = GlobalTerrain()
        self.revision = -1
        self._next_id = 0

    def _reexpress(self, poses):
        for entry in self.entries:
            pts = entry.world_points(poses)
            ax, ay, gz = _entry_axis(pts, self.terrain)
            entry.axis_xy = (ax, ay)
            entry.ground_z = gz
            entry.bins = _coverage_bins(pts, entry.axis_xy, entry.ground_z)

    def aggregate(self, candidates, snapshot):
        """Attach candidates to nodes, merge identities within 0.5 m."""
        revision, poses = snapshot
        if revision != self.revision:
            self._reexpress(poses)
            self.revision = revision
        node_ids = sorted(poses.keys())
        node_xy = np.array([poses[n][:2, 3] for n in node_ids])
        for cand in candidates:
            k = int(np.argmin(np.linalg.norm(node_xy - cand.axis_xy, axis=1)))
            nid = node_ids[k]
            cand.node_id = nid
            local = se3.transform_points(se3.inverse(poses[nid]), cand.points)
            target = None
            for entry in self.entries:
                if np.hypot(entry.axis_xy[0] - cand.axis_xy[0],
                            entry.axis_xy[1] - cand.axis_xy[1]) <= MERGE_RADIUS:
                    target = entry
                    break
            if target is None:
                target = TreeEntry(
                    tree_id=self._next_id,
                    contributions=[],
                    bins=np.zeros(_N_BINS, dtype=bool),
                    axis_xy=cand.axis_xy,
                    ground_z=cand.ground_z,
                )
                self._next_id += 1
                self.entries.append(target)
            target.contributions.append((nid, local, cand.payload_id))
            pts = target.world_points(poses)
            ax, ay, gz = _entry_axis(pts, self.terrain)
            target.axis_xy = (ax, ay)
            target.ground_z = gz
            target.bins = _coverage_bins(pts, target.axis_xy, target.ground_z)
        return self

    def build_inventory(self, poses, mission_id="", timestamp=0.0,
                        min_coverage_deg=MIN_COVERAGE_DEG):
        records = []
        for entry in sorted(self.entries, key=lambda e: e.tree_id):
            model = reconstruct(entry, poses, min_coverage_deg=min_coverage_deg)
            if model is None:
                continue
            records.append(estimate_traits(model, self.terrain))
        return Inventory(records=records, mission_id=mission_id, timestamp=timestamp)


def _entry_axis(points_world, terrain):
    """Axis footprint refreshed from the merged cloud."""
    gz0 = terrain.height_at(
        float(np.median(points_world[:, 0])), float(np.median(points_world[:, 1]))
    )
    z_norm = points_world[:, 2] - gz0
    sel = (z_norm >= SLICE_LO) & (z_norm <= SLICE_HI)
    pts = points_world[sel] if sel.sum() >= 12 else points_world
    zn = z_norm[sel] if sel.sum() >= 12 else z_norm
    centers = _bin_circle_centers(pts, zn)
    if len(centers) >= 2:
        axis = _fit_axis(centers)
        ax, ay = _axis_xy_at(axis, 0.0)
    else:
        ax, ay = float(np.median(pts[:, 0])), float(np.median(pts[:, 1]))
    gz = terrain.height_at(float(ax), float(ay))
    return float(ax), float(ay), float(gz)


def _coverage_bins(points_world, axis_xy, ground_z):
    z_norm = points_world[:, 2] - ground_z
    sel = (z_norm >= SLICE_LO) & (z_norm <= SLICE_HI)
    pts = points_world[sel]
    bins = np.zeros(_N_BINS, dtype=bool)
    if len(pts) == 0:
        return bins
    ang = np.arctan2(pts[:, 1] - axis_xy[1], pts[:, 0] - axis_xy[0])
    idx = ((np.degrees(ang) + 360.0) % 360.0 / COVERAGE_BIN_DEG).astype(int)
    bins[np.clip(idx, 0, _N_BINS - 1)] = True
    return bins


def aggregate(candidates, graph, registry):
    """Module-level wrapper matching the pipeline interface."""
    return registry.aggregate(candidates, graph.snapshot())


# ---------------------------------------------------------------------------
# reconstruction and traits
# ---------------------------------------------------------------------------


@dataclass
class Frustum:
    bottom: np.ndarray  # (3,) center
    top: np.ndarray
    r_bottom: float
    r_top: float


@dataclass
class TreeModel:
    tree_id: int
    frustums: list
    residual: float
    coverage_deg: float
    flags: tuple = ()

    def circles(self):
        """(z, cx, cy, r) chain: first bottom plus every frustum top."""
        out = [(self.frustums[0].bottom[2], self.frustums[0].bottom[0],
                self.frustums[0].bottom[1], self.frustums[0].r_bottom)]
        for f in self.frustums:
            out.append((f.top[2], f.top[0], f.top[1], f.r_top))
        return out


def _aligned_entry_points(entry, poses):
    """Union of contributions snapped coaxial at current graph poses.

    Residual pose-graph error offsets whole views by centimeters; each
    view's own circle fits locate the stem axis far more precisely, so the
    views are translated onto the first view's axis before the union fit.
    """
    aligned = []
    ref_axis = None
    for nid, local, _ in entry.contributions:
        w = se3.transform_points(poses[nid], local)
        zc = w[:, 2] - entry.ground_z
        centers = _bin_circle_centers(w, zc, min_points=10)
        axis = _fit_axis(centers) if len(centers) >= 1 else None
        if axis is None:
            aligned.append(w)
            continue
        if ref_axis is None:
            ref_axis = axis
            aligned.append(w)
            continue
        z_mid = float(np.median([c[0] for c in centers]))
        rx, ry = _axis_xy_at(ref_axis, z_mid)
        ax, ay = _axis_xy_at(axis, z_mid)
        delta = np.array([rx - ax, ry - ay])
        if np.linalg.norm(delta) <= MERGE_RADIUS:
            w = w.copy()
            w[:, :2] += delta
        aligned.append(w)
    return np.vstack(aligned)


def reconstruct(entry, poses, min_coverage_deg=MIN_COVERAGE_DEG):
    """Frustum chain from an aggregated candidate; None below the gate."""
    coverage = entry.coverage_deg()
    if coverage < min_coverage_deg:
        return None
    pts = _aligned_entry_points(entry, poses)
    z_norm = pts[:, 2] - entry.ground_z
    bins = np.floor(z_norm / RECON_BIN).astype(int)
    circles = []
    for b in np.unique(bins):
        sel = bins == b
        if sel.sum() < RECON_MIN_BIN_POINTS:
            continue
        try:
            center, r, rmse = fit_circle(pts[sel, :2])
            d = np.hypot(pts[sel, 0] - center[0], pts[sel, 1] - center[1])
            keep = np.abs(d - r) <= max(2.5 * rmse, 0.02)
            if keep.sum() >= RECON_MIN_BIN_POINTS and keep.sum() < sel.sum():
                center, r, rmse = fit_circle(pts[sel][keep, :2])
        except ValueError:
            continue
        if rmse > RECON_MAX_RMSE or r <= 0:
            continue
        z_world = entry.ground_z + (b + 0.5) * RECON_BIN
        circles.append((z_world, center[0], center[1], r))
    if len(circles) < 2:
        return None
    circles.sort(key=lambda c: c[0])
    frustums = [
        Frustum(
            bottom=np.array([c0[1], c0[2], c0[0]]),
            top=np.array([c1[1], c1[2], c1[0]]),
            r_bottom=c0[3],
            r_top=c1[3],
        )
        for c0, c1 in zip(circles[:-1], circles[1:])
    ]
    flags = ()
    if circles[-1][3] > COARSE_TOP_RADIUS:
        flags = ("height_coarse",)
    assert coverage >= min_coverage_deg
    return TreeModel(
        tree_id=entry.tree_id,
        frustums=frustums,
        residual=0.0,
        coverage_deg=coverage,
        flags=flags,
    )


def estimate_traits(model, terrain):
    """DBH at 1.3 m above local ground + coarse height from the top frustum."""
    circles = model.circles()
    zs = np.array([c[0] for c in circles])
    rs = np.array([c[3] for c in circles])
    # ground position: extrapolate the axis through the two lowest circles
    (z0, x0c, y0c, _), (z1, x1c, y1c, _) = circles[0], circles[1]
    dz = max(z1 - z0, 1e-9)
    gz_probe = terrain.height_at(x0c, y0c)
    tpar = (gz_probe - z0) / dz
    gx = x0c + tpar * (x1c - x0c)
    gy = y0c + tpar * (y1c - y0c)
    gz = terrain.height_at(float(gx), float(gy))

    flags = list(model.flags)
    z_dbh = gz + 1.3
    if z_dbh < zs[0] or z_dbh > zs[-1]:
        r_dbh = rs[int(np.argmin(np.abs(zs - z_dbh)))]
        flags.append("dbh_extrapolated")
    else:
        r_dbh = float(np.interp(z_dbh, zs, rs))
    height = float(zs[-1] + RECON_BIN / 2.0 - gz)
    return TreeRecord(
        tree_id=model.tree_id,
        x=float(gx),
        y=float(gy),
        dbh_m=2.0 * float(r_dbh),
        height_m=height,
        coverage_deg=model.coverage_deg,
        flags=tuple(flags),
    )


def export_tree_models(models, path):
    """One frustum per line: id x0 y0 z0 x1 y1 z1 r0 r1."""
    with open(path, "w") as f:
        for model in sorted(models, key=lambda m: m.tree_id):
            for fr in model.frustums:
                vals = [*fr.bottom, *fr.top, fr.r_bottom, fr.r_top]
                f.write(f"{model.tree_id} " + " ".join(repr(float(v)) for v in vals) + "\n")


# ---------------------------------------------------------------------------
# per-payload driver
# ---------------------------------------------------------------------------


def process_payload(payload, snapshot, registry):
    """CSF -> segmentation -> aggregation for one payload. Returns candidates."""
    revision, poses = snapshot
    from .slam import payload_world_points

    pts = payload_world_points(payload, poses)
    terrain = extract_terrain_csf(pts)
    if terrain is None:
        return []
    registry.terrain.update(terrain)
    candidates = segment_trees(pts, terrain, payload_id=payload.payload_id)
    registry.aggregate(candidates, (revision, poses))
    return candidates
