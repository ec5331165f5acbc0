"""Point-cloud helpers: voxel downsampling and binary PLY I/O."""

import struct

import numpy as np


def voxel_downsample(points, voxel):
    """Centroid per occupied voxel; deterministic ordering by voxel key."""
    points = np.asarray(points, dtype=float)
    if len(points) == 0 or voxel <= 0:
        return points.reshape(-1, 3).copy()
    keys = np.floor(points / voxel).astype(np.int64)
    # single sortable key; offsets keep coordinates positive
    mins = keys.min(axis=0)
    k = keys - mins
    span = k.max(axis=0) + 1
    lin = (k[:, 0] * span[1] + k[:, 1]) * span[2] + k[:, 2]
    order = np.argsort(lin, kind="stable")
    lin_s = lin[order]
    pts_s = points[order]
    starts = np.flatnonzero(np.r_[True, lin_s[1:] != lin_s[:-1]])
    sums = np.add.reduceat(pts_s, starts, axis=0)
    counts = np.diff(np.r_[starts, len(pts_s)])
    return sums / counts[:, None]


def write_ply(points, path):
    """Binary little-endian PLY with float32 x, y, z."""
    points = np.asarray(points, dtype=np.float32)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(points.astype("<f4").tobytes())


def read_ply(path):
    with open(path, "rb") as f:
        n = None
        while True:
            line = f.readline().decode("ascii").strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line == "end_header":
                break
        if n is None:
            raise ValueError("missing vertex element in PLY header")
        data = f.read(n * 12)
    return np.frombuffer(data, dtype="<f4").reshape(n, 3).astype(np.float64)
