#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeats 5]

The same arrays drive both backends directly, so the comparison is
independent of the FORESTSURVEY_NO_NUMBA flag.
"""

import argparse
import time

import numpy as np

from forestsurvey import accel, world as worldmod


def timeit(fn, repeats):
    fn()  # warm-up (JIT compile on the numba side)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_raycast(repeats):
    world = worldmod.generate_forest(extent=(40.0, 25.0), stem_density=250.0, seed=3)
    arrays = world.arrays()
    rng = np.random.default_rng(0)
    n = 23040  # wide-104 sweep: 64 channels x 360 azimuths
    elev = rng.uniform(-0.9, 0.9, n)
    azim = rng.uniform(0, 2 * np.pi, n)
    dirs = np.column_stack([
        np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)
    ])
    origin = np.array([20.0, 12.0, 1.0])
    args = (
        arrays.heights, arrays.x0, arrays.y0, arrays.cell, arrays.zmin,
        arrays.zmax, arrays.tree_bound, arrays.tree_span, arrays.fr_base,
        arrays.fr_axis, arrays.fr_len, arrays.fr_r0, arrays.fr_k, arrays.discs,
    )
    out_r = np.empty(n)
    out_s = np.empty(n, dtype=np.int64)

    t_nb = timeit(lambda: accel._trace_rays_nb(origin, dirs, 30.0, *args, out_r, out_s),
                  repeats)
    t_np = timeit(lambda: accel._trace_rays_np(origin, dirs, 30.0, *args, out_r, out_s),
                  repeats)
    return f"trace_rays ({n} rays)", t_nb, t_np


def bench_gdf(repeats):
    rng = np.random.default_rng(1)
    cost = rng.random((100, 100)) * 0.4
    passable = rng.random((100, 100)) > 0.05
    passable[50, 50] = True
    t_nb = timeit(lambda: accel._gdf_dijkstra_nb(cost, passable, 50, 50, 0.04),
                  repeats)
    t_np = timeit(lambda: accel._gdf_sweep_np(cost, passable, 50, 50, 0.04),
                  repeats)
    return "geodesic_field (100x100)", t_nb, t_np


def bench_scatter(repeats):
    rng = np.random.default_rng(2)
    n = 20000
    ii = rng.integers(0, 100, n)
    jj = rng.integers(0, 100, n)
    zz = rng.normal(size=n)

    def run(fn):
        ring = np.zeros((100, 100, 7))
        count = np.zeros((100, 100), dtype=np.int64)
        head = np.zeros((100, 100), dtype=np.int64)
        fn(ii, jj, zz, ring, count, head)

    t_nb = timeit(lambda: run(accel._scatter_hits_nb), repeats)
    t_np = timeit(lambda: run(accel._scatter_hits_np), repeats)
    return f"scatter_hits ({n} pts)", t_nb, t_np


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rows = [
        bench_raycast(args.repeats),
        bench_gdf(args.repeats),
        bench_scatter(args.repeats),
    ]
    print(f"{'kernel':32s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    for name, t_nb, t_np in rows:
        print(f"{name:32s} {t_nb*1e3:8.2f} ms {t_np*1e3:8.2f} ms {t_np/t_nb:7.1f}x")


if __name__ == "__main__":
    main()
