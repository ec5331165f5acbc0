"""Synthetic forest worlds with analytic ground truth.

A world is a terrain heightfield, a set of tapered (optionally leaning) tree
stems modeled as stacked cone frustums, and traversability patches
(undergrowth, bog). Everything is deterministic for a fixed seed and exact
enough to serve as the oracle for the whole downstream pipeline.
"""

import json
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import accel, geometry
from .records import Inventory, TreeRecord

SCENE_FORMAT_VERSION = 1

MIN_STEM_SPACING = 0.5  # m between stem bases
MAX_LEAN_RAD = np.deg2rad(15.0)
DBH_HEIGHT = 1.3  # breast height above ground (forestry convention)

TERRAIN_PRESETS = {
    "flat": {"slope_deg": 0.0, "noise_amp": 0.15},
    "slope-7": {"slope_deg": 7.0, "noise_amp": 0.25},
    "slope-12": {"slope_deg": 12.0, "noise_amp": 0.3},
}


class PlacementError(RuntimeError):
    """Raised when the requested stem count cannot fit the extent."""


@dataclass
class TerrainField:
    heights: np.ndarray  # (ny, nx) ground elevation, m
    cell: float  # m
    origin: tuple = (0.0, 0.0)
    smoothness: float = 8.0  # gaussian correlation length, m

    def __post_init__(self):
        self.heights = np.ascontiguousarray(self.heights, dtype=np.float64)
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("terrain elevations must be finite")

    @property
    def extent(self):
        ny, nx = self.heights.shape
        return ((nx - 1) * self.cell, (ny - 1) * self.cell)

    def height_at(self, x, y):
        """Bilinear ground height; coordinates clamped to the extent."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        scalar = x.ndim == 0
        h = accel._bilinear_np(
            self.heights,
            self.origin[0],
            self.origin[1],
            self.cell,
            np.atleast_1d(x),
            np.atleast_1d(y),
        )
        return float(h[0]) if scalar else h


@dataclass
class TreeSpec:
    tree_id: int
    base_xy: tuple  # (x, y) on terrain
    height: float  # vertical stem extent, m
    taper_h: np.ndarray  # knot heights above ground, m (ascending, first 0)
    taper_r: np.ndarray  # knot radii, m (positive, non-increasing)
    lean_dir: float = 0.0  # azimuth of lean, rad
    lean_angle: float = 0.0  # rad, < 15 deg
    crown_height: float | None = None  # occlusion disc height, m above ground
    crown_radius: float = 0.0

    def __post_init__(self):
        self.taper_h = np.asarray(self.taper_h, dtype=float)
        self.taper_r = np.asarray(self.taper_r, dtype=float)
        if np.any(self.taper_r <= 0.0):
            raise ValueError("taper radii must be strictly positive")
        if np.any(np.diff(self.taper_r) > 1e-12):
            raise ValueError("taper radii must be non-increasing with height")
        if self.lean_angle >= MAX_LEAN_RAD:
            raise ValueError("lean angle must stay below 15 degrees")

    def radius_at(self, h):
        """Stem radius at a vertical height above the base ground."""
        return float(np.interp(h, self.taper_h, self.taper_r))

    @property
    def dbh(self):
        return 2.0 * self.radius_at(DBH_HEIGHT)

    def axis_dir(self):
        s, c = np.sin(self.lean_angle), np.cos(self.lean_angle)
        return np.array([s * np.cos(self.lean_dir), s * np.sin(self.lean_dir), c])


@dataclass
class PatchRegion:
    polygon: np.ndarray  # (N, 2)
    kind: str  # "undergrowth" | "bog"
    severity: float  # [0, 1]

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=float)
        if not geometry.polygon_is_simple(self.polygon):
            raise ValueError("patch polygon must be simple")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")
        if self.kind not in ("undergrowth", "bog"):
            raise ValueError(f"unknown patch kind {self.kind!r}")


WorldArrays = namedtuple(
    "WorldArrays",
    "heights x0 y0 cell zmin zmax tree_bound tree_span "
    "fr_base fr_axis fr_len fr_r0 fr_k discs",
)


@dataclass
class ForestWorld:
    terrain: TerrainField
    trees: list
    patches: list
    seed: int
    clutter_returns: bool = False  # undergrowth adds low clutter points
    _arrays: WorldArrays | None = field(default=None, repr=False, compare=False)

    @property
    def extent(self):
        return self.terrain.extent

    def arrays(self):
        """Packed geometry for the ray-tracing kernels (cached)."""
        if self._arrays is None:
            self._arrays = _pack_world(self)
        return self._arrays

    def patch_at(self, x, y):
        """Highest-severity patch containing (x, y), or None."""
        best = None
        for p in self.patches:
            if geometry.point_in_polygon([[x, y]], p.polygon)[0]:
                if best is None or p.severity > best.severity:
                    best = p
        return best


def _pack_world(world):
    terrain = world.terrain
    fr_base, fr_axis, fr_len, fr_r0, fr_k = [], [], [], [], []
    tree_bound = np.zeros((len(world.trees), 3))
    tree_span = np.zeros((len(world.trees), 2), dtype=np.int64)
    discs = []
    for idx, tree in enumerate(world.trees):
        zb = terrain.height_at(*tree.base_xy)
        base = np.array([tree.base_xy[0], tree.base_xy[1], zb])
        d = tree.axis_dir()
        cos_l = d[2]
        start = len(fr_base)
        hs = tree.taper_h
        for a in range(len(hs) - 1):
            h0, h1 = hs[a], hs[a + 1]
            if h1 <= h0:
                continue
            p0 = base + d * (h0 / cos_l)
            length = (h1 - h0) / cos_l
            r0, r1 = tree.taper_r[a], tree.taper_r[a + 1]
            fr_base.append(p0)
            fr_axis.append(d)
            fr_len.append(length)
            fr_r0.append(r0)
            fr_k.append((r1 - r0) / length)
        tree_span[idx] = (start, len(fr_base))
        # conservative 2D footprint: lean sweep plus the largest radius
        sweep = np.tan(tree.lean_angle) * tree.height
        tree_bound[idx] = (
            base[0] + 0.5 * sweep * np.cos(tree.lean_dir),
            base[1] + 0.5 * sweep * np.sin(tree.lean_dir),
            0.5 * sweep + float(np.max(tree.taper_r)) + 0.05,
        )
        if tree.crown_height is not None and tree.crown_radius > 0.0:
            top = base + d * (tree.crown_height / cos_l)
            discs.append([top[0], top[1], top[2], tree.crown_radius])
    return WorldArrays(
        heights=terrain.heights,
        x0=float(terrain.origin[0]),
        y0=float(terrain.origin[1]),
        cell=float(terrain.cell),
        zmin=float(terrain.heights.min(initial=0.0)),
        zmax=float(terrain.heights.max(initial=0.0)),
        tree_bound=tree_bound,
        tree_span=tree_span,
        fr_base=np.asarray(fr_base).reshape(-1, 3),
        fr_axis=np.asarray(fr_axis).reshape(-1, 3),
        fr_len=np.asarray(fr_len, dtype=float),
        fr_r0=np.asarray(fr_r0, dtype=float),
        fr_k=np.asarray(fr_k, dtype=float),
        discs=np.asarray(discs, dtype=float).reshape(-1, 4),
    )


def make_terrain(extent, cell=1.0, preset="flat", seed=0, slope_deg=None, noise_amp=None):
    """Smooth fractal terrain with a configurable mean slope along +x."""
    params = dict(TERRAIN_PRESETS[preset])
    if slope_deg is not None:
        params["slope_deg"] = slope_deg
    if noise_amp is not None:
        params["noise_amp"] = noise_amp
    nx = max(2, int(round(extent[0] / cell)) + 1)
    ny = max(2, int(round(extent[1] / cell)) + 1)
    rng = np.random.default_rng(seed)
    smoothness = 8.0
    noise = rng.standard_normal((ny, nx))
    noise = ndimage.gaussian_filter(noise, sigma=smoothness / cell, mode="nearest")
    std = noise.std()
    if std > 1e-12:
        noise *= params["noise_amp"] / std
    xs = np.arange(nx) * cell
    plane = np.tan(np.deg2rad(params["slope_deg"])) * xs
    heights = noise + plane[None, :]
    return TerrainField(heights=heights, cell=cell, smoothness=smoothness)


def _default_taper(dbh, height):
    """Piecewise-linear taper holding radius(1.3 m) == dbh/2 by construction.

    The segment containing breast height spans [0.4, 0.6 H] so circle fits
    around 1.3 m see a single linear law.
    """
    r13 = dbh / 2.0
    slope = -0.55 * r13 / height
    h_knee = 0.6 * height
    r04 = r13 + slope * (0.4 - DBH_HEIGHT)
    r_knee = r13 + slope * (h_knee - DBH_HEIGHT)
    r_top = max(0.012, 0.12 * r13)
    r_top = min(r_top, r_knee)  # keep non-increasing
    return (
        np.array([0.0, 0.4, h_knee, height]),
        np.array([1.12 * r04, r04, r_knee, r_top]),
    )


def generate_forest(
    extent,
    stem_density,
    dbh_distribution=(0.3, 0.07),
    patch_spec=None,
    seed=0,
    terrain_preset="flat",
    crown_occlusion=False,
    clutter_returns=False,
    margin=1.0,
):
    """Sample a forest world: terrain, rejection-placed stems, patches.

    ``stem_density`` is trees per hectare; the tree count is
    round(density * area_ha). Deterministic for a fixed seed.
    """
    w, h = float(extent[0]), float(extent[1])
    if w < 0 or h < 0:
        raise ValueError("extent must be non-negative")
    if stem_density < 0:
        raise ValueError("stem density must be >= 0")
    area_ha = (w * h) / 1e4
    n_trees = int(round(stem_density * area_ha))

    rng = np.random.default_rng(seed)
    terrain = make_terrain((max(w, 1.0), max(h, 1.0)), preset=terrain_preset, seed=seed)

    placeable_w = w - 2 * margin
    placeable_h = h - 2 * margin
    if n_trees > 0 and (placeable_w <= 0 or placeable_h <= 0):
        raise PlacementError(f"extent {extent} too small for {n_trees} stems")

    positions = []
    attempts = 0
    max_attempts = 200 * max(n_trees, 1)
    while len(positions) < n_trees:
        if attempts >= max_attempts:
            raise PlacementError(
                f"could not place {n_trees} stems in {extent} after {attempts} draws"
            )
        attempts += 1
        x = margin + rng.random() * placeable_w
        y = margin + rng.random() * placeable_h
        ok = True
        for px, py in positions:
            if (px - x) ** 2 + (py - y) ** 2 < MIN_STEM_SPACING**2:
                ok = False
                break
        if ok:
            positions.append((x, y))

    trees = []
    for i, (x, y) in enumerate(positions):
        dbh = float(np.clip(rng.normal(*dbh_distribution), 0.08, 0.8))
        height = float(np.clip(55.0 * dbh + rng.normal(0.0, 2.0), 5.0, 28.0))
        taper_h, taper_r = _default_taper(dbh, height)
        lean_dir = rng.random() * 2.0 * np.pi
        lean_angle = min(abs(rng.normal(0.0, np.deg2rad(1.5))), np.deg2rad(5.0))
        crown_h, crown_r = None, 0.0
        if crown_occlusion:
            crown_h = 0.45 * height
            crown_r = 2.0
        trees.append(
            TreeSpec(
                tree_id=i,
                base_xy=(x, y),
                height=height,
                taper_h=taper_h,
                taper_r=taper_r,
                lean_dir=lean_dir,
                lean_angle=lean_angle,
                crown_height=crown_h,
                crown_radius=crown_r,
            )
        )

    patches = _build_patches(patch_spec, (w, h), rng)
    return ForestWorld(
        terrain=terrain,
        trees=trees,
        patches=patches,
        seed=seed,
        clutter_returns=clutter_returns,
    )


def _build_patches(patch_spec, extent, rng):
    if not patch_spec:
        return []
    patches = []
    for item in patch_spec:
        if isinstance(item, PatchRegion):
            patches.append(item)
            continue
        kind = item.get("kind", "undergrowth")
        count = int(item.get("count", 1))
        r_lo, r_hi = item.get("radius_range", (2.0, 5.0))
        s_lo, s_hi = item.get("severity_range", (0.3, 0.8))
        for _ in range(count):
            if "center" in item:
                center = item["center"]
            else:
                center = (rng.random() * extent[0], rng.random() * extent[1])
            radius = r_lo + rng.random() * (r_hi - r_lo)
            severity = s_lo + rng.random() * (s_hi - s_lo)
            if "severity" in item:
                severity = float(item["severity"])
            patches.append(
                PatchRegion(
                    polygon=geometry.blob_polygon(center, radius, rng),
                    kind=kind,
                    severity=severity,
                )
            )
    return patches


def ground_truth_inventory(world):
    """One record per stem, straight from the generative parameters."""
    records = [
        TreeRecord(
            tree_id=t.tree_id,
            x=float(t.base_xy[0]),
            y=float(t.base_xy[1]),
            dbh_m=t.dbh,
            height_m=t.height,
        )
        for t in world.trees
    ]
    return Inventory(records=records, mission_id=f"ground-truth-{world.seed}")


def ray_intersect(world, origin, direction, max_range):
    """Nearest terrain/stem intersection, or None.

    Returns (hit_point, surface_id) with surface_id "terrain" or "tree:<id>".
    """
    direction = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError("direction must be a unit vector")
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    ranges, surfs = accel.trace_rays(origin, direction[None, :], max_range, world.arrays())
    if surfs[0] == accel.MISS:
        return None
    point = np.asarray(origin, dtype=float) + ranges[0] * direction
    if surfs[0] == accel.SURF_TERRAIN:
        surface = "terrain"
    else:
        surface = f"tree:{world.trees[int(surfs[0]) - 1].tree_id}"
    return point, surface


# ---------------------------------------------------------------------------
# scene file (versioned JSON)
# ---------------------------------------------------------------------------


def world_to_dict(world):
    return {
        "version": SCENE_FORMAT_VERSION,
        "seed": world.seed,
        "clutter_returns": world.clutter_returns,
        "terrain": {
            "cell": world.terrain.cell,
            "origin": list(world.terrain.origin),
            "smoothness": world.terrain.smoothness,
            "heights": world.terrain.heights.tolist(),
        },
        "trees": [
            {
                "id": t.tree_id,
                "base_xy": list(t.base_xy),
                "height": t.height,
                "taper_h": t.taper_h.tolist(),
                "taper_r": t.taper_r.tolist(),
                "lean_dir": t.lean_dir,
                "lean_angle": t.lean_angle,
                "crown_height": t.crown_height,
                "crown_radius": t.crown_radius,
            }
            for t in world.trees
        ],
        "patches": [
            {
                "polygon": p.polygon.tolist(),
                "kind": p.kind,
                "severity": p.severity,
            }
            for p in world.patches
        ],
    }


def world_from_dict(data):
    if data.get("version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene version {data.get('version')!r}")
    terrain = TerrainField(
        heights=np.asarray(data["terrain"]["heights"], dtype=float),
        cell=float(data["terrain"]["cell"]),
        origin=tuple(data["terrain"]["origin"]),
        smoothness=float(data["terrain"]["smoothness"]),
    )
    trees = [
        TreeSpec(
            tree_id=int(t["id"]),
            base_xy=tuple(t["base_xy"]),
            height=float(t["height"]),
            taper_h=np.asarray(t["taper_h"], dtype=float),
            taper_r=np.asarray(t["taper_r"], dtype=float),
            lean_dir=float(t["lean_dir"]),
            lean_angle=float(t["lean_angle"]),
            crown_height=t.get("crown_height"),
            crown_radius=float(t.get("crown_radius", 0.0)),
        )
        for t in data["trees"]
    ]
    patches = [
        PatchRegion(
            polygon=np.asarray(p["polygon"], dtype=float),
            kind=p["kind"],
            severity=float(p["severity"]),
        )
        for p in data["patches"]
    ]
    return ForestWorld(
        terrain=terrain,
        trees=trees,
        patches=patches,
        seed=int(data["seed"]),
        clutter_returns=bool(data.get("clutter_returns", False)),
    )


def save_scene(world, path):
    with open(path, "w") as f:
        json.dump(world_to_dict(world), f)


def load_scene(path):
    with open(path) as f:
        return world_from_dict(json.load(f))
