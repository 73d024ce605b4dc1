"""Independent reference implementations used only by the tests."""

import numpy as np
from scipy.spatial.transform import Rotation as R


def linear_solve_intersections(origins, dirs, v1, v2, v3, eps=1e-12):
    """Solve [-d, v2 - v1, v3 - v1] [t, beta, gamma]^T = r0 - v1 by inversion.

    Returns (hit, tbg) with the same acceptance rules as the kernel:
    |det| >= eps, beta, gamma >= 0, beta + gamma <= 1, t > eps.
    """
    a = np.stack([-dirs, v2 - v1, v3 - v1], axis=-1)
    det = np.linalg.det(a)
    ok = np.abs(det) >= eps
    x = np.zeros((origins.shape[0], 3))
    inv = np.linalg.inv(np.where(ok[:, None, None], a, np.eye(3)))
    x = np.einsum("nij,nj->ni", inv, origins - v1)
    t, b, g = x[:, 0], x[:, 1], x[:, 2]
    hit = ok & (b >= 0) & (g >= 0) & (b + g <= 1) & (t > eps)
    return hit, x


def quaternion_angle_deg(m1, m2):
    q1 = R.from_matrix(m1).as_quat()
    q2 = R.from_matrix(m2).as_quat()
    dot = np.abs(np.sum(q1 * q2, axis=-1))
    w = np.clip(dot, 0.0, 1.0)
    s = np.sqrt(np.clip(1.0 - w * w, 0.0, None))
    return np.degrees(2.0 * np.arctan2(s, w))


def naive_fk(parents, offsets, root_t, rots):
    """Per-joint recursive evaluation, no caching."""

    def glob(j):
        if parents[j] < 0:
            return rots[j], root_t + offsets[j]
        pr, pt = glob(parents[j])
        return pr @ rots[j], pt + pr @ offsets[j]

    return np.array([glob(j)[1] for j in range(len(parents))])


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g
