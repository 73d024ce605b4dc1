"""Procedural meshes: spheres for tests, skinned tubes for the toy character."""

import numpy as np


def uv_sphere(n_lat: int = 26, n_lon: int = 40, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Closed UV sphere with outward-facing triangles.

    ``n_lat`` counts latitude bands; triangle count is ``2 * n_lon * (n_lat - 1)``.
    """
    theta = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0.0, 2.0 * np.pi, n_lon, endpoint=False)
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    ring = np.stack([st * np.cos(phi), st * np.sin(phi), ct * np.ones_like(phi)],
                    axis=-1).reshape(-1, 3)
    verts = np.vstack([[0, 0, 1], ring, [0, 0, -1]]) * radius + np.asarray(center, dtype=np.float64)
    top, bottom = 0, len(verts) - 1
    faces = []
    for j in range(n_lon):
        faces.append([top, 1 + j, 1 + (j + 1) % n_lon])
    for i in range(n_lat - 2):
        a0 = 1 + i * n_lon
        b0 = a0 + n_lon
        for j in range(n_lon):
            a, a1 = a0 + j, a0 + (j + 1) % n_lon
            b, b1 = b0 + j, b0 + (j + 1) % n_lon
            faces.append([a, b, b1])
            faces.append([a, b1, a1])
    last = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        faces.append([bottom, last + (j + 1) % n_lon, last + j])
    return verts, np.array(faces, dtype=np.int64)


def tube_along_chain(joint_positions, end_site, radius: float, n_around: int = 12,
                     rings_per_bone: int = 4, blend: float = 0.25):
    """Capped tube following a rest-pose chain laid out along one axis.

    Returns (vertices, triangles, skin_weights, ring_info) where ``ring_info``
    maps each ring to (bone index, height along the bone in [0, 1]). Vertex k
    of a ring sits at angle ``2 pi k / n_around`` measured from +x towards +z
    around a +y bone axis, so angle 0 faces +x.
    """
    pts = np.vstack([np.asarray(joint_positions, dtype=np.float64), np.asarray(end_site)[None]])
    n_bones = len(pts) - 1
    ang = 2.0 * np.pi * np.arange(n_around) / n_around
    verts, weights, ring_info = [], [], []
    for b in range(n_bones):
        a, c = pts[b], pts[b + 1]
        axis = (c - a) / np.linalg.norm(c - a)
        u = np.array([1.0, 0.0, 0.0])
        u = u - axis * (u @ axis)
        if np.linalg.norm(u) < 1e-6:
            u = np.array([0.0, 0.0, 1.0]) - axis * axis[2]
        u /= np.linalg.norm(u)
        w = np.cross(u, axis)
        last = b == n_bones - 1
        n_rings = rings_per_bone + (1 if last else 0)
        for r in range(n_rings):
            s = r / rings_per_bone
            centre = a + s * (c - a)
            ring = centre + radius * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * w)
            verts.append(ring)
            ring_info.append((b, s))
            # Blend into the parent bone near the proximal joint.
            if b > 0 and s < blend:
                wp = 0.5 * (1.0 - s / blend)
                row = ((b - 1, wp), (b, 1.0 - wp))
            else:
                row = ((b, 1.0),)
            weights.extend([row] * n_around)
    verts = np.vstack(verts)
    n_rings = len(ring_info)
    faces = []
    for r in range(n_rings - 1):
        for k in range(n_around):
            a0 = r * n_around + k
            a1 = r * n_around + (k + 1) % n_around
            b0 = a0 + n_around
            b1 = a1 + n_around
            faces.append([a0, b0, b1])
            faces.append([a0, b1, a1])
    # caps
    cap0 = len(verts)
    cap1 = cap0 + 1
    verts = np.vstack([verts, pts[0], pts[-1]])
    weights.append(((0, 1.0),))
    weights.append(((n_bones - 1, 1.0),))
    last0 = (n_rings - 1) * n_around
    for k in range(n_around):
        faces.append([cap0, (k + 1) % n_around, k])
        faces.append([cap1, last0 + k, last0 + (k + 1) % n_around])
    return verts, np.array(faces, dtype=np.int64), tuple(weights), ring_info
