"""Hot numeric kernels with two interchangeable backends.

The numba `@njit` path is the default. Setting the environment variable
``FORESTSURVEY_NO_NUMBA=1`` (or numba being unimportable) selects the pure
numpy fallbacks instead. Both backends implement identical arithmetic; the
test suite and `benchmarks/bench_kernels.py` compare them.

Kernels here:
  * ray tracing against a heightfield + stacked-cone-frustum stems
  * geodesic distance fields over a cost grid (Dijkstra vs relaxation sweeps)
  * ring-buffer scatter of scan hits into the local terrain map
"""

import os

import numpy as np

_DISABLE = os.environ.get("FORESTSURVEY_NO_NUMBA", "0") == "1"

if not _DISABLE:
    try:
        from numba import njit

        USE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False
else:
    USE_NUMBA = False

if not USE_NUMBA:

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


# ---------------------------------------------------------------------------
# ray tracing
# ---------------------------------------------------------------------------

MISS = -1
SURF_TERRAIN = 0
# stem hits are encoded as SURF_TERRAIN + 1 + tree_index

_TERRAIN_STEP = 0.25  # coarse march step (m); crossings refined by bisection
_BISECT_ITERS = 45


@njit(cache=True)
def _bilinear(heights, x0, y0, cell, x, y):
    ny, nx = heights.shape
    gx = (x - x0) / cell
    gy = (y - y0) / cell
    if gx < 0.0:
        gx = 0.0
    if gy < 0.0:
        gy = 0.0
    if gx > nx - 1.000001:
        gx = nx - 1.000001
    if gy > ny - 1.000001:
        gy = ny - 1.000001
    i = int(gy)
    j = int(gx)
    fx = gx - j
    fy = gy - i
    h00 = heights[i, j]
    h01 = heights[i, j + 1]
    h10 = heights[i + 1, j]
    h11 = heights[i + 1, j + 1]
    return (
        h00 * (1.0 - fx) * (1.0 - fy)
        + h01 * fx * (1.0 - fy)
        + h10 * (1.0 - fx) * fy
        + h11 * fx * fy
    )


@njit(cache=True)
def _terrain_hit_nb(heights, x0, y0, cell, zmin, zmax, ox, oy, oz, dx, dy, dz, smax):
    # Restrict the march to the s-interval where the ray's z can reach the
    # terrain band and its xy stays over the extent.
    ny, nx = heights.shape
    x1 = x0 + (nx - 1) * cell
    y1 = y0 + (ny - 1) * cell
    s_lo = 0.0
    s_hi = smax
    if dz > 1e-12:
        if oz > zmax:
            return -1.0
        s_hi = min(s_hi, (zmax - oz) / dz)
    elif dz < -1e-12:
        if oz > zmax:
            s_lo = max(s_lo, (zmax - oz) / dz)
        s_hi = min(s_hi, (zmin - 1.0 - oz) / dz)
    else:
        if oz > zmax:
            return -1.0
    if abs(dx) > 1e-12:
        ta = (x0 - ox) / dx
        tb = (x1 - ox) / dx
        if ta > tb:
            ta, tb = tb, ta
        s_lo = max(s_lo, ta)
        s_hi = min(s_hi, tb)
    elif ox < x0 or ox > x1:
        return -1.0
    if abs(dy) > 1e-12:
        ta = (y0 - oy) / dy
        tb = (y1 - oy) / dy
        if ta > tb:
            ta, tb = tb, ta
        s_lo = max(s_lo, ta)
        s_hi = min(s_hi, tb)
    elif oy < y0 or oy > y1:
        return -1.0
    if s_hi <= s_lo:
        return -1.0

    s = s_lo
    f_prev = (oz + s * dz) - _bilinear(heights, x0, y0, cell, ox + s * dx, oy + s * dy)
    if f_prev <= 0.0:
        return s if s > 1e-9 else -1.0
    while s < s_hi:
        s_next = min(s + _TERRAIN_STEP, s_hi)
        f = (oz + s_next * dz) - _bilinear(
            heights, x0, y0, cell, ox + s_next * dx, oy + s_next * dy
        )
        if f <= 0.0:
            lo, hi = s, s_next
            for _ in range(_BISECT_ITERS):
                mid = 0.5 * (lo + hi)
                fm = (oz + mid * dz) - _bilinear(
                    heights, x0, y0, cell, ox + mid * dx, oy + mid * dy
                )
                if fm > 0.0:
                    lo = mid
                else:
                    hi = mid
            return 0.5 * (lo + hi)
        if s_next >= s_hi:
            break
        s = s_next
        f_prev = f
    return -1.0


@njit(cache=True)
def _trace_rays_nb(
    origin,
    dirs,
    max_range,
    heights,
    x0,
    y0,
    cell,
    zmin,
    zmax,
    tree_bound,
    tree_span,
    fr_base,
    fr_axis,
    fr_len,
    fr_r0,
    fr_k,
    discs,
    out_range,
    out_surf,
):
    ox, oy, oz = origin[0], origin[1], origin[2]
    n = dirs.shape[0]
    n_trees = tree_bound.shape[0]
    n_discs = discs.shape[0]
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best = max_range
        surf = MISS

        t = _terrain_hit_nb(
            heights, x0, y0, cell, zmin, zmax, ox, oy, oz, dx, dy, dz, max_range
        )
        if 0.0 < t <= best:
            best = t
            surf = SURF_TERRAIN

        dxy2 = dx * dx + dy * dy
        for k in range(n_trees):
            cx = tree_bound[k, 0]
            cy = tree_bound[k, 1]
            rb = tree_bound[k, 2]
            ux = cx - ox
            uy = cy - oy
            if dxy2 < 1e-16:
                d2 = ux * ux + uy * uy
            else:
                tc = (ux * dx + uy * dy) / dxy2
                if tc < 0.0:
                    tc = 0.0
                elif tc > best:
                    tc = best
                ex = ox + tc * dx - cx
                ey = oy + tc * dy - cy
                d2 = ex * ex + ey * ey
            if d2 > rb * rb:
                continue
            for f in range(tree_span[k, 0], tree_span[k, 1]):
                wx = ox - fr_base[f, 0]
                wy = oy - fr_base[f, 1]
                wz = oz - fr_base[f, 2]
                ax_, ay_, az_ = fr_axis[f, 0], fr_axis[f, 1], fr_axis[f, 2]
                uw = wx * ax_ + wy * ay_ + wz * az_
                cd = dx * ax_ + dy * ay_ + dz * az_
                kk = fr_k[f]
                r0u = fr_r0[f] + kk * uw
                A = 1.0 - cd * cd - kk * kk * cd * cd
                B = 2.0 * (
                    (wx * dx + wy * dy + wz * dz) - uw * cd - kk * cd * r0u
                )
                C = (wx * wx + wy * wy + wz * wz) - uw * uw - r0u * r0u
                if abs(A) < 1e-14:
                    if abs(B) > 1e-14:
                        s = -C / B
                        u = uw + s * cd
                        if 1e-9 < s < best and 0.0 <= u <= fr_len[f]:
                            best = s
                            surf = SURF_TERRAIN + 1 + k
                    continue
                disc = B * B - 4.0 * A * C
                if disc < 0.0:
                    continue
                sq = np.sqrt(disc)
                for sign in (-1.0, 1.0):
                    s = (-B + sign * sq) / (2.0 * A)
                    if 1e-9 < s < best:
                        u = uw + s * cd
                        if 0.0 <= u <= fr_len[f] and fr_r0[f] + kk * u >= 0.0:
                            best = s
                            surf = SURF_TERRAIN + 1 + k

        # crown occlusion discs absorb anything beyond them
        for q in range(n_discs):
            if abs(dz) < 1e-12:
                continue
            s = (discs[q, 2] - oz) / dz
            if 1e-9 < s < best:
                px = ox + s * dx - discs[q, 0]
                py = oy + s * dy - discs[q, 1]
                if px * px + py * py <= discs[q, 3] * discs[q, 3]:
                    surf = MISS
                    best = max_range
                    break

        if surf == MISS:
            out_range[i] = -1.0
            out_surf[i] = MISS
        else:
            out_range[i] = best
            out_surf[i] = surf


def _bilinear_np(heights, x0, y0, cell, x, y):
    ny, nx = heights.shape
    gx = np.clip((x - x0) / cell, 0.0, nx - 1.000001)
    gy = np.clip((y - y0) / cell, 0.0, ny - 1.000001)
    j = gx.astype(np.int64)
    i = gy.astype(np.int64)
    fx = gx - j
    fy = gy - i
    return (
        heights[i, j] * (1 - fx) * (1 - fy)
        + heights[i, j + 1] * fx * (1 - fy)
        + heights[i + 1, j] * (1 - fx) * fy
        + heights[i + 1, j + 1] * fx * fy
    )


def _terrain_hit_np(heights, x0, y0, cell, zmin, zmax, origin, dirs, smax):
    """Vectorized march + bisection. Returns hit distances (-1 for miss)."""
    ox, oy, oz = origin
    n = len(dirs)
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    ny, nx = heights.shape
    x1 = x0 + (nx - 1) * cell
    y1 = y0 + (ny - 1) * cell

    s_lo = np.zeros(n)
    s_hi = np.full(n, smax)
    up = dz > 1e-12
    down = dz < -1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        s_hi = np.where(up, np.minimum(s_hi, (zmax - oz) / dz), s_hi)
        s_lo = np.where(down & (oz > zmax), np.maximum(s_lo, (zmax - oz) / dz), s_lo)
        s_hi = np.where(down, np.minimum(s_hi, (zmin - 1.0 - oz) / dz), s_hi)
        for d, lo, hi, o in ((dx, x0, x1, ox), (dy, y0, y1, oy)):
            ta = (lo - o) / d
            tb = (hi - o) / d
            tmin = np.minimum(ta, tb)
            tmax = np.maximum(ta, tb)
            live = np.abs(d) > 1e-12
            s_lo = np.where(live, np.maximum(s_lo, tmin), s_lo)
            s_hi = np.where(live, np.minimum(s_hi, tmax), s_hi)
            s_hi = np.where(~live & ((o < lo) | (o > hi)), -1.0, s_hi)
    s_hi = np.where((~up & ~down) & (oz > zmax), -1.0, s_hi)

    out = np.full(n, -1.0)
    active = s_hi > s_lo
    if not np.any(active):
        return out
    idx = np.flatnonzero(active)
    lo_s = s_lo[idx]
    hi_s = s_hi[idx]

    def f_of(s, sel):
        x = ox + s * dx[sel]
        y = oy + s * dy[sel]
        z = oz + s * dz[sel]
        return z - _bilinear_np(heights, x0, y0, cell, x, y)

    f0 = f_of(lo_s, idx)
    immediate = f0 <= 0.0
    out[idx[immediate & (lo_s > 1e-9)]] = lo_s[immediate & (lo_s > 1e-9)]
    marching = ~immediate
    idx = idx[marching]
    cur = lo_s[marching]
    end = hi_s[marching]
    bracket_lo = np.full(len(idx), np.nan)
    bracket_hi = np.full(len(idx), np.nan)
    found = np.zeros(len(idx), dtype=bool)
    while len(idx) and np.any(~found & (cur < end)):
        live = ~found & (cur < end)
        nxt = np.minimum(cur + _TERRAIN_STEP, end)
        f = np.full(len(idx), 1.0)
        f[live] = f_of(nxt[live], idx[live])
        crossed = live & (f <= 0.0)
        bracket_lo[crossed] = cur[crossed]
        bracket_hi[crossed] = nxt[crossed]
        found |= crossed
        cur = nxt
    if np.any(found):
        sel = idx[found]
        lo_b = bracket_lo[found]
        hi_b = bracket_hi[found]
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo_b + hi_b)
            fm = f_of(mid, sel)
            pos = fm > 0.0
            lo_b = np.where(pos, mid, lo_b)
            hi_b = np.where(pos, hi_b, mid)
        out[sel] = 0.5 * (lo_b + hi_b)
    return out


def _trace_rays_np(
    origin,
    dirs,
    max_range,
    heights,
    x0,
    y0,
    cell,
    zmin,
    zmax,
    tree_bound,
    tree_span,
    fr_base,
    fr_axis,
    fr_len,
    fr_r0,
    fr_k,
    discs,
    out_range,
    out_surf,
):
    ox, oy, oz = origin
    n = dirs.shape[0]
    best = np.full(n, float(max_range))
    surf = np.full(n, MISS, dtype=np.int64)

    t = _terrain_hit_np(heights, x0, y0, cell, zmin, zmax, origin, dirs, max_range)
    hit = (t > 0.0) & (t <= best)
    best[hit] = t[hit]
    surf[hit] = SURF_TERRAIN

    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    dxy2 = dx * dx + dy * dy
    for k in range(tree_bound.shape[0]):
        cx, cy, rb = tree_bound[k]
        ux = cx - ox
        uy = cy - oy
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = np.clip(np.where(dxy2 > 1e-16, (ux * dx + uy * dy) / dxy2, 0.0), 0.0, best)
        ex = ox + tc * dx - cx
        ey = oy + tc * dy - cy
        d2 = np.where(dxy2 > 1e-16, ex * ex + ey * ey, ux * ux + uy * uy)
        cand = np.flatnonzero(d2 <= rb * rb)
        if len(cand) == 0:
            continue
        cdx, cdy, cdz = dx[cand], dy[cand], dz[cand]
        for f in range(tree_span[k, 0], tree_span[k, 1]):
            w = np.array([ox, oy, oz]) - fr_base[f]
            ax = fr_axis[f]
            uw = w @ ax
            cd = cdx * ax[0] + cdy * ax[1] + cdz * ax[2]
            kk = fr_k[f]
            r0u = fr_r0[f] + kk * uw
            A = 1.0 - cd * cd - kk * kk * cd * cd
            B = 2.0 * ((w[0] * cdx + w[1] * cdy + w[2] * cdz) - uw * cd - kk * cd * r0u)
            C = w @ w - uw * uw - r0u * r0u
            disc = B * B - 4.0 * A * C
            sq = np.sqrt(np.maximum(disc, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                for numer in (-B - sq, -B + sq):
                    s = np.where(
                        np.abs(A) < 1e-14,
                        np.where(np.abs(B) > 1e-14, -C / B, -1.0),
                        numer / (2.0 * A),
                    )
                    u = uw + s * cd
                    ok = (
                        (disc >= 0.0)
                        & (s > 1e-9)
                        & (s < best[cand])
                        & (u >= 0.0)
                        & (u <= fr_len[f])
                        & (fr_r0[f] + kk * u >= 0.0)
                    )
                    upd = cand[ok]
                    best[upd] = s[ok]
                    surf[upd] = SURF_TERRAIN + 1 + k

    for q in range(discs.shape[0]):
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(dz) > 1e-12, (discs[q, 2] - oz) / dz, -1.0)
        px = ox + s * dx - discs[q, 0]
        py = oy + s * dy - discs[q, 1]
        absorbed = (
            (s > 1e-9)
            & (s < best)
            & (px * px + py * py <= discs[q, 3] * discs[q, 3])
        )
        surf[absorbed] = MISS
        best[absorbed] = max_range

    miss = surf == MISS
    out_range[:] = np.where(miss, -1.0, best)
    out_surf[:] = surf


def trace_rays(origin, dirs, max_range, arrays):
    """Trace rays from a common origin; returns (ranges, surface_ids).

    ``arrays`` is the packed world geometry (see world.WorldArrays).
    Ranges are -1 for misses; surface id 0 is terrain, 1+i is tree index i.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    out_range = np.empty(len(dirs))
    out_surf = np.empty(len(dirs), dtype=np.int64)
    fn = _trace_rays_nb if USE_NUMBA else _trace_rays_np
    fn(
        origin,
        dirs,
        float(max_range),
        arrays.heights,
        arrays.x0,
        arrays.y0,
        arrays.cell,
        arrays.zmin,
        arrays.zmax,
        arrays.tree_bound,
        arrays.tree_span,
        arrays.fr_base,
        arrays.fr_axis,
        arrays.fr_len,
        arrays.fr_r0,
        arrays.fr_k,
        arrays.discs,
        out_range,
        out_surf,
    )
    return out_range, out_surf


# ---------------------------------------------------------------------------
# geodesic distance field
# ---------------------------------------------------------------------------

_NEIGH = np.array(
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    dtype=np.int64,
)


@njit(cache=True)
def _gdf_dijkstra_nb(cost, passable, gi, gj, cell):
    h, w = cost.shape
    dist = np.full((h, w), np.inf)
    done = np.zeros((h, w), dtype=np.bool_)
    cap = h * w * 8 + 8
    heap_d = np.empty(cap)
    heap_c = np.empty(cap, dtype=np.int64)
    size = 0

    # push
    heap_d[0] = 0.0
    heap_c[0] = gi * w + gj
    size = 1
    dist[gi, gj] = 0.0

    sqrt2 = np.sqrt(2.0)
    while size > 0:
        top_d = heap_d[0]
        top_c = heap_c[0]
        size -= 1
        heap_d[0] = heap_d[size]
        heap_c[0] = heap_c[size]
        # sift down
        pos = 0
        while True:
            lc = 2 * pos + 1
            rc = lc + 1
            smallest = pos
            if lc < size and heap_d[lc] < heap_d[smallest]:
                smallest = lc
            if rc < size and heap_d[rc] < heap_d[smallest]:
                smallest = rc
            if smallest == pos:
                break
            heap_d[pos], heap_d[smallest] = heap_d[smallest], heap_d[pos]
            heap_c[pos], heap_c[smallest] = heap_c[smallest], heap_c[pos]
            pos = smallest

        ci = top_c // w
        cj = top_c % w
        if done[ci, cj]:
            continue
        if top_d > dist[ci, cj]:
            continue
        done[ci, cj] = True
        for di in range(-1, 2):
            for dj in range(-1, 2):
                if di == 0 and dj == 0:
                    continue
                ni = ci + di
                nj = cj + dj
                if ni < 0 or ni >= h or nj < 0 or nj >= w:
                    continue
                if not passable[ni, nj] or done[ni, nj]:
                    continue
                step = cell * (sqrt2 if di != 0 and dj != 0 else 1.0)
                nd = dist[ci, cj] + step * (
                    1.0 + 0.5 * (cost[ci, cj] + cost[ni, nj])
                )
                if nd < dist[ni, nj]:
                    dist[ni, nj] = nd
                    # sift up insert
                    heap_d[size] = nd
                    heap_c[size] = ni * w + nj
                    pos = size
                    size += 1
                    while pos > 0:
                        parent = (pos - 1) // 2
                        if heap_d[parent] <= heap_d[pos]:
                            break
                        heap_d[pos], heap_d[parent] = heap_d[parent], heap_d[pos]
                        heap_c[pos], heap_c[parent] = heap_c[parent], heap_c[pos]
                        pos = parent
    return dist


def _gdf_sweep_np(cost, passable, gi, gj, cell):
    """Bellman-Ford relaxation sweeps; converges to the Dijkstra solution."""
    h, w = cost.shape
    dist = np.full((h, w), np.inf)
    dist[gi, gj] = 0.0
    big = np.inf
    padded_cost = np.pad(cost, 1, constant_values=0.0)
    padded_pass = np.pad(passable, 1, constant_values=False)
    for _ in range(h * w + 16):  # info moves >= 1 hop per sweep
        padded = np.pad(dist, 1, constant_values=big)
        best = dist.copy()
        for di, dj in _NEIGH:
            nd = padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
            nc = padded_cost[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
            np_ok = padded_pass[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
            step = cell * (np.sqrt(2.0) if di != 0 and dj != 0 else 1.0)
            cand = nd + step * (1.0 + 0.5 * (nc + cost))
            cand = np.where(np_ok, cand, big)
            best = np.minimum(best, cand)
        best = np.where(passable, best, big)
        best[gi, gj] = 0.0
        if np.array_equal(
            np.nan_to_num(best, posinf=1e300), np.nan_to_num(dist, posinf=1e300)
        ):
            break
        dist = best
    dist = np.where(passable, dist, np.inf)
    dist[gi, gj] = 0.0
    return dist


def geodesic_field(cost, passable, goal_ij, cell):
    """Geodesic distance-to-goal over an 8-connected grid.

    Edge weight = step length * (1 + mean endpoint cost); impassable cells
    stay at +inf.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    passable = np.ascontiguousarray(passable, dtype=bool)
    gi, gj = int(goal_ij[0]), int(goal_ij[1])
    if USE_NUMBA:
        return _gdf_dijkstra_nb(cost, passable, gi, gj, float(cell))
    return _gdf_sweep_np(cost, passable, gi, gj, float(cell))


# ---------------------------------------------------------------------------
# terrain-map hit scatter
# ---------------------------------------------------------------------------


@njit(cache=True)
def _scatter_hits_nb(ii, jj, zz, ring, count, head):
    k = ring.shape[2]
    for n in range(len(ii)):
        i = ii[n]
        j = jj[n]
        ring[i, j, head[i, j]] = zz[n]
        head[i, j] = (head[i, j] + 1) % k
        if count[i, j] < k:
            count[i, j] += 1


def _scatter_hits_np(ii, jj, zz, ring, count, head):
    k = ring.shape[2]
    n = len(ii)
    if n == 0:
        return
    lin = ii.astype(np.int64) * ring.shape[1] + jj
    order = np.lexsort((np.arange(n), lin))
    lin_s = lin[order]
    starts = np.flatnonzero(np.r_[True, lin_s[1:] != lin_s[:-1]])
    group_id = np.cumsum(np.r_[True, lin_s[1:] != lin_s[:-1]]) - 1
    pos_in_group = np.arange(n) - starts[group_id]
    ii_s, jj_s, zz_s = ii[order], jj[order], zz[order]
    slot = (head[ii_s, jj_s] + pos_in_group) % k
    ring[ii_s, jj_s, slot] = zz_s  # duplicate slots: later write wins
    sizes = np.diff(np.r_[starts, n])
    cells_i = ii_s[starts]
    cells_j = jj_s[starts]
    head[cells_i, cells_j] = (head[cells_i, cells_j] + sizes) % k
    count[cells_i, cells_j] = np.minimum(count[cells_i, cells_j] + sizes, k)


def scatter_hits(ii, jj, zz, ring, count, head):
    """Append per-cell elevation hits into fixed-size ring buffers."""
    ii = np.ascontiguousarray(ii, dtype=np.int64)
    jj = np.ascontiguousarray(jj, dtype=np.int64)
    zz = np.ascontiguousarray(zz, dtype=np.float64)
    fn = _scatter_hits_nb if USE_NUMBA else _scatter_hits_np
    fn(ii, jj, zz, ring, count, head)
