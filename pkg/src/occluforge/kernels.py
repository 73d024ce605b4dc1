"""Hot loops for ray casting: Moller-Trumbore, BVH build/traversal, visibility.

Every kernel here is written in the numba-compatible subset. With
``OCCLUFORGE_NUMBA=0`` the ``@jit`` decorator is a no-op and the same code
runs as ordinary Python; batch visibility then switches to the vectorized
numpy path in :func:`visibility_numpy`.
"""

import numpy as np

from ._accel import USE_NUMBA, jit

# Triangle layout used everywhere below: v0 (T,3), e1 = v1 - v0, e2 = v2 - v0.


@jit(error_model="numpy")
def mt_intersect(ox, oy, oz, dx, dy, dz, v0, e1, e2, eps):
    """Scalar Moller-Trumbore. Returns (hit, t, beta, gamma)."""
    # pvec = d x e2
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) < eps:
        return False, 0.0, 0.0, 0.0
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    beta = (tx * px + ty * py + tz * pz) * inv
    if beta < 0.0 or beta > 1.0:
        return False, 0.0, 0.0, 0.0
    # qvec = tvec x e1
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    gamma = (dx * qx + dy * qy + dz * qz) * inv
    if gamma < 0.0 or beta + gamma > 1.0:
        return False, 0.0, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    if t <= eps:
        return False, 0.0, 0.0, 0.0
    return True, t, beta, gamma


@jit(error_model="numpy")
def mt_batch(origins, dirs, v0, e1, e2, eps):
    """Pairwise rays[i] against triangles[i]. Returns hit (N,), tbg (N,3)."""
    n = origins.shape[0]
    hit = np.zeros(n, dtype=np.bool_)
    tbg = np.zeros((n, 3))
    for i in range(n):
        h, t, b, g = mt_intersect(
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2],
            v0[i], e1[i], e2[i], eps,
        )
        hit[i] = h
        tbg[i, 0] = t
        tbg[i, 1] = b
        tbg[i, 2] = g
    return hit, tbg


def triangle_edges(vertices, triangles):
    v = np.ascontiguousarray(vertices, dtype=np.float64)
    f = np.asarray(triangles, dtype=np.int64)
    v0 = np.ascontiguousarray(v[f[:, 0]])
    e1 = np.ascontiguousarray(v[f[:, 1]] - v0)
    e2 = np.ascontiguousarray(v[f[:, 2]] - v0)
    return v0, e1, e2


# ---------------------------------------------------------------------------
# BVH
# ---------------------------------------------------------------------------


@jit
def build_bvh_arrays(vertices, triangles, max_leaf):
    """Median-split AABB tree over triangles.

    Returns (node_min, node_max, left, right, start, count, order). Leaves
    have ``count > 0`` and own ``order[start:start + count]``.
    """
    n_tri = triangles.shape[0]
    tri_min = np.empty((n_tri, 3))
    tri_max = np.empty((n_tri, 3))
    cent = np.empty((n_tri, 3))
    for i in range(n_tri):
        for k in range(3):
            a = vertices[triangles[i, 0], k]
            b = vertices[triangles[i, 1], k]
            c = vertices[triangles[i, 2], k]
            lo = min(a, min(b, c))
            hi = max(a, max(b, c))
            tri_min[i, k] = lo
            tri_max[i, k] = hi
            cent[i, k] = (a + b + c) / 3.0

    max_nodes = 2 * n_tri
    node_min = np.zeros((max_nodes, 3))
    node_max = np.zeros((max_nodes, 3))
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    start = np.zeros(max_nodes, dtype=np.int64)
    count = np.zeros(max_nodes, dtype=np.int64)
    order = np.arange(n_tri)

    stack_node = np.zeros(max_nodes, dtype=np.int64)
    stack_s = np.zeros(max_nodes, dtype=np.int64)
    stack_e = np.zeros(max_nodes, dtype=np.int64)
    sp = 0
    stack_node[0] = 0
    stack_s[0] = 0
    stack_e[0] = n_tri
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        s = stack_s[sp]
        e = stack_e[sp]
        bmin = np.full(3, np.inf)
        bmax = np.full(3, -np.inf)
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for j in range(s, e):
            i = order[j]
            for k in range(3):
                bmin[k] = min(bmin[k], tri_min[i, k])
                bmax[k] = max(bmax[k], tri_max[i, k])
                cmin[k] = min(cmin[k], cent[i, k])
                cmax[k] = max(cmax[k], cent[i, k])
        for k in range(3):
            # Pad so slab-test rounding can never reject a triangle the
            # exact intersection test would accept.
            pad = 1e-9 * (bmax[k] - bmin[k] + 1.0)
            node_min[node, k] = bmin[k] - pad
            node_max[node, k] = bmax[k] + pad
        n = e - s
        axis = 0
        ext = cmax[0] - cmin[0]
        for k in range(1, 3):
            if cmax[k] - cmin[k] > ext:
                ext = cmax[k] - cmin[k]
                axis = k
        if n <= max_leaf or ext <= 0.0:
            start[node] = s
            count[node] = n
            continue
        sub = order[s:e].copy()
        keys = np.empty(n)
        for j in range(n):
            keys[j] = cent[sub[j], axis]
        idx = np.argsort(keys, kind="mergesort")
        for j in range(n):
            order[s + j] = sub[idx[j]]
        mid = s + n // 2
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        stack_node[sp] = lc
        stack_s[sp] = s
        stack_e[sp] = mid
        sp += 1
        stack_node[sp] = rc
        stack_s[sp] = mid
        stack_e[sp] = e
        sp += 1
    return (
        node_min[:n_nodes].copy(),
        node_max[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        start[:n_nodes].copy(),
        count[:n_nodes].copy(),
        order,
    )


@jit(error_model="numpy")
def _slab(ox, oy, oz, ix, iy, iz, bmin, bmax):
    t1 = (bmin[0] - ox) * ix
    t2 = (bmax[0] - ox) * ix
    tn = min(t1, t2)
    tf = max(t1, t2)
    t1 = (bmin[1] - oy) * iy
    t2 = (bmax[1] - oy) * iy
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    t1 = (bmin[2] - oz) * iz
    t2 = (bmax[2] - oz) * iz
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    return tn, tf


@jit(error_model="numpy")
def _safe_inv(x):
    if abs(x) < 1e-300:
        return 1e300 if x >= 0.0 else -1e300
    return 1.0 / x


@jit(error_model="numpy")
def bvh_closest(o, d, tmax, v0, e1, e2, node_min, node_max, left, right,
                start, count, order, eps):
    """Nearest hit with t < tmax; ties go to the lowest triangle index.

    Returns (tri, t, beta, gamma, n_tests); tri == -1 on miss.
    """
    ox, oy, oz = o[0], o[1], o[2]
    dx, dy, dz = d[0], d[1], d[2]
    ix = _safe_inv(dx)
    iy = _safe_inv(dy)
    iz = _safe_inv(dz)
    best_t = tmax
    best_i = -1
    best_b = 0.0
    best_g = 0.0
    n_tests = 0
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    tn, tf = _slab(ox, oy, oz, ix, iy, iz, node_min[0], node_max[0])
    if tn <= tf and tf >= 0.0 and tn <= best_t:
        stack[0] = 0
        sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if count[node] > 0:
            for j in range(start[node], start[node] + count[node]):
                tri = order[j]
                n_tests += 1
                h, t, b, g = mt_intersect(ox, oy, oz, dx, dy, dz,
                                          v0[tri], e1[tri], e2[tri], eps)
                if h and (t < best_t or (best_i >= 0 and t == best_t and tri < best_i)):
                    best_t = t
                    best_i = tri
                    best_b = b
                    best_g = g
            continue
        lc = left[node]
        rc = right[node]
        tnl, tfl = _slab(ox, oy, oz, ix, iy, iz, node_min[lc], node_max[lc])
        tnr, tfr = _slab(ox, oy, oz, ix, iy, iz, node_min[rc], node_max[rc])
        hit_l = tnl <= tfl and tfl >= 0.0 and tnl <= best_t
        hit_r = tnr <= tfr and tfr >= 0.0 and tnr <= best_t
        # Push the farther child first so the nearer one is popped next.
        if hit_l and hit_r:
            if tnl <= tnr:
                stack[sp] = rc
                stack[sp + 1] = lc
            else:
                stack[sp] = lc
                stack[sp + 1] = rc
            sp += 2
        elif hit_l:
            stack[sp] = lc
            sp += 1
        elif hit_r:
            stack[sp] = rc
            sp += 1
    return best_i, best_t, best_b, best_g, n_tests


@jit(error_model="numpy")
def brute_closest(o, d, tmax, v0, e1, e2, eps):
    """Reference nearest hit over every triangle (same tie rule as the BVH)."""
    best_t = tmax
    best_i = -1
    best_b = 0.0
    best_g = 0.0
    for tri in range(v0.shape[0]):
        h, t, b, g = mt_intersect(o[0], o[1], o[2], d[0], d[1], d[2],
                                  v0[tri], e1[tri], e2[tri], eps)
        if h and t < best_t:
            best_t = t
            best_i = tri
            best_b = b
            best_g = g
    return best_i, best_t, best_b, best_g, v0.shape[0]


@jit(error_model="numpy")
def bvh_closest_batch(origins, dirs, tmax, v0, e1, e2, node_min, node_max,
                      left, right, start, count, order, eps):
    n = origins.shape[0]
    tri = np.empty(n, dtype=np.int64)
    tbg = np.empty((n, 3))
    tests = np.empty(n, dtype=np.int64)
    for i in range(n):
        r = bvh_closest(origins[i], dirs[i], tmax[i], v0, e1, e2, node_min,
                        node_max, left, right, start, count, order, eps)
        tri[i] = r[0]
        tbg[i, 0] = r[1]
        tbg[i, 1] = r[2]
        tbg[i, 2] = r[3]
        tests[i] = r[4]
    return tri, tbg, tests


@jit(error_model="numpy")
def brute_closest_batch(origins, dirs, tmax, v0, e1, e2, eps):
    n = origins.shape[0]
    tri = np.empty(n, dtype=np.int64)
    tbg = np.empty((n, 3))
    for i in range(n):
        r = brute_closest(origins[i], dirs[i], tmax[i], v0, e1, e2, eps)
        tri[i] = r[0]
        tbg[i, 0] = r[1]
        tbg[i, 1] = r[2]
        tbg[i, 2] = r[3]
    return tri, tbg


@jit(error_model="numpy")
def visibility_bvh(cams, markers, skin_eps, v0, e1, e2, node_min, node_max,
                   left, right, start, count, order, eps):
    """(C, M) boolean: camera c has an unobstructed line to marker m."""
    n_cam = cams.shape[0]
    n_mark = markers.shape[0]
    out = np.ones((n_cam, n_mark), dtype=np.bool_)
    d = np.empty(3)
    for c in range(n_cam):
        for m in range(n_mark):
            dx = markers[m, 0] - cams[c, 0]
            dy = markers[m, 1] - cams[c, 1]
            dz = markers[m, 2] - cams[c, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            if dist <= skin_eps:
                continue
            d[0] = dx / dist
            d[1] = dy / dist
            d[2] = dz / dist
            r = bvh_closest(cams[c], d, dist - skin_eps, v0, e1, e2, node_min,
                            node_max, left, right, start, count, order, eps)
            out[c, m] = r[0] < 0
    return out


# ---------------------------------------------------------------------------
# Pure-numpy path
# ---------------------------------------------------------------------------


def mt_numpy(origins, dirs, v0, e1, e2, eps):
    """Vectorized Moller-Trumbore, every ray against every triangle.

    Returns t of shape (R, T), ``inf`` where there is no hit. Same operation
    order as :func:`mt_intersect`.
    """
    o = origins[:, None, :]
    d = dirs[:, None, :]
    p = np.cross(d, e2[None, :, :])
    det = np.einsum("tk,rtk->rt", e1, p)
    ok = np.abs(det) >= eps
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tv = o - v0[None, :, :]
        beta = np.einsum("rtk,rtk->rt", tv, p) * inv
        q = np.cross(tv, e1[None, :, :])
        gamma = np.einsum("rk,rtk->rt", dirs, q) * inv
        t = np.einsum("tk,rtk->rt", e2, q) * inv
    ok &= (beta >= 0.0) & (beta <= 1.0) & (gamma >= 0.0) & (beta + gamma <= 1.0) & (t > eps)
    return np.where(ok, t, np.inf)


def visibility_numpy(cams, markers, skin_eps, v0, e1, e2, eps, chunk=4096):
    n_cam = cams.shape[0]
    n_mark = markers.shape[0]
    orig = np.repeat(cams, n_mark, axis=0)
    diff = np.tile(markers, (n_cam, 1)) - orig
    dist = np.linalg.norm(diff, axis=1)
    far = dist > skin_eps
    dirs = np.zeros_like(diff)
    dirs[far] = diff[far] / dist[far, None]
    vis = np.ones(orig.shape[0], dtype=bool)
    rows = max(1, chunk // max(1, v0.shape[0]))
    for s in range(0, orig.shape[0], rows):
        t = mt_numpy(orig[s:s + rows], dirs[s:s + rows], v0, e1, e2, eps)
        tmin = t.min(axis=1) if t.shape[1] else np.full(t.shape[0], np.inf)
        vis[s:s + rows] = ~(tmin < dist[s:s + rows] - skin_eps) | ~far[s:s + rows]
    return vis.reshape(n_cam, n_mark)


__all__ = [
    "USE_NUMBA",
    "mt_intersect",
    "mt_batch",
    "mt_numpy",
    "triangle_edges",
    "build_bvh_arrays",
    "bvh_closest",
    "bvh_closest_batch",
    "brute_closest",
    "brute_closest_batch",
    "visibility_bvh",
    "visibility_numpy",
]
