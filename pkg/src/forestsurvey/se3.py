"""Minimal SE(3)/SO(3) helpers used across the simulator and the SLAM stack.

Poses are 4x4 homogeneous matrices (float64). Batched rotation log/exp are
vectorized so the pose-graph optimizer can evaluate all factor residuals in
a handful of numpy passes.
"""

import numpy as np

_EPS = 1e-12


def make_pose(t, rotation=None):
    """Build a 4x4 pose from a translation and an optional 3x3 rotation."""
    T = np.eye(4)
    if rotation is not None:
        T[:3, :3] = rotation
    T[:3, 3] = np.asarray(t, dtype=float)
    return T


def pose_xyyaw(x, y, yaw, z=0.0):
    """Planar pose embedded in SE(3): translation (x, y, z), rotation about z."""
    c, s = np.cos(yaw), np.sin(yaw)
    T = np.eye(4)
    T[0, 0] = c
    T[0, 1] = -s
    T[1, 0] = s
    T[1, 1] = c
    T[:3, 3] = (x, y, z)
    return T


def inverse(T):
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def relative(T_a, T_b):
    """Pose of b expressed in frame a: a^-1 * b."""
    return inverse(T_a) @ T_b


def yaw_of(T):
    """Heading angle of the pose's x-axis projected on the ground plane."""
    return float(np.arctan2(T[1, 0], T[0, 0]))


def yaw_aligned(T):
    """Gravity-aligned version of a pose: same translation, yaw-only rotation."""
    return pose_xyyaw(T[0, 3], T[1, 3], yaw_of(T), z=T[2, 3])


def rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def exp_so3(w):
    """Rodrigues formula, single rotation vector -> 3x3 matrix."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < _EPS:
        K = skew(w)
        return np.eye(3) + K + 0.5 * (K @ K)
    axis = w / theta
    K = skew(axis)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def log_so3(R):
    """Rotation vector of a single 3x3 rotation matrix."""
    return log_so3_batch(R[None])[0]


def skew(w):
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def exp_so3_batch(w):
    """Rodrigues formula over an (N, 3) array of rotation vectors."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    theta = np.linalg.norm(w, axis=1)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    axis = w / safe[:, None]
    K = np.zeros((len(w), 3, 3))
    K[:, 0, 1] = -axis[:, 2]
    K[:, 0, 2] = axis[:, 1]
    K[:, 1, 0] = axis[:, 2]
    K[:, 1, 2] = -axis[:, 0]
    K[:, 2, 0] = -axis[:, 1]
    K[:, 2, 1] = axis[:, 0]
    sin_t = np.sin(theta)[:, None, None]
    cos_t = np.cos(theta)[:, None, None]
    R = np.eye(3)[None] + sin_t * K + (1.0 - cos_t) * (K @ K)
    if np.any(small):
        Ks = np.zeros((small.sum(), 3, 3))
        ws = w[small]
        Ks[:, 0, 1] = -ws[:, 2]
        Ks[:, 0, 2] = ws[:, 1]
        Ks[:, 1, 0] = ws[:, 2]
        Ks[:, 1, 2] = -ws[:, 0]
        Ks[:, 2, 0] = -ws[:, 1]
        Ks[:, 2, 1] = ws[:, 0]
        R[small] = np.eye(3)[None] + Ks + 0.5 * (Ks @ Ks)
    return R


def log_so3_batch(R):
    """Rotation vectors of an (N, 3, 3) stack of rotation matrices."""
    R = np.asarray(R, dtype=float)
    tr = np.clip((np.trace(R, axis1=1, axis2=2) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(tr)
    vee = np.stack([
        R[:, 2, 1] - R[:, 1, 2],
        R[:, 0, 2] - R[:, 2, 0],
        R[:, 1, 0] - R[:, 0, 1],
    ], axis=1)
    sin_t = np.sin(theta)
    # Generic branch; small angles fall back to first order, angles near pi
    # recover the axis from the symmetric part.
    out = np.empty((len(R), 3))
    generic = sin_t > 1e-6
    out[generic] = vee[generic] * (0.5 * theta[generic] / sin_t[generic])[:, None]
    small = (~generic) & (theta < 0.5)
    out[small] = 0.5 * vee[small]
    near_pi = (~generic) & (theta >= 0.5)
    if np.any(near_pi):
        for idx in np.flatnonzero(near_pi):
            A = (R[idx] + np.eye(3)) * 0.5
            axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
            k = int(np.argmax(axis))
            if axis[k] > _EPS:
                col = A[:, k] / axis[k]
                out[idx] = col / np.linalg.norm(col) * theta[idx]
            else:
                out[idx] = 0.0
    return out


def wrap_angle(a):
    """Wrap angle(s) to [-pi, pi]."""
    return np.arctan2(np.sin(a), np.cos(a))


def integrate_planar_twist(x, y, yaw, vx, vy, wz, dt):
    """Exact constant-twist integration of a planar body-frame command.

    Closed form keeps two half steps bit-compatible with one full step,
    which the simulator's step-consistency contract relies on.
    """
    if abs(wz) < 1e-9:
        dx_b = vx * dt
        dy_b = vy * dt
        dyaw = wz * dt
    else:
        th = wz * dt
        s, c = np.sin(th), np.cos(th)
        dx_b = (vx * s + vy * (c - 1.0)) / wz
        dy_b = (vx * (1.0 - c) + vy * s) / wz
        dyaw = th
    cy, sy = np.cos(yaw), np.sin(yaw)
    return (
        x + cy * dx_b - sy * dy_b,
        y + sy * dx_b + cy * dy_b,
        float(wrap_angle(yaw + dyaw)),
    )


def transform_points(T, points):
    """Apply a 4x4 pose to an (N, 3) point array."""
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        return points.reshape(0, 3)
    return points @ T[:3, :3].T + T[:3, 3]
