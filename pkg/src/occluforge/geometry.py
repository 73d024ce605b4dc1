"""Geometric primitives: rays, triangles, rotations, rigid transforms.

All arithmetic is float64. Rotation matrices act on column vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

from . import kernels
from .errors import AlignmentUnderdetermined, DegenerateRotation6D, PreconditionError

PARALLEL_EPS = 1e-12
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def _vec3(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(3)
    return a.copy()


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = _vec3(self.direction)
        n = np.linalg.norm(d)
        if not n > 0.0:
            raise PreconditionError("ray direction must be non-zero")
        object.__setattr__(self, "origin", _vec3(self.origin))
        object.__setattr__(self, "direction", d / n)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Triangle:
    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray

    def __post_init__(self):
        for name in ("v1", "v2", "v3"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))

    @property
    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(np.cross(self.v2 - self.v1, self.v3 - self.v1)))


@dataclass(frozen=True)
class Hit:
    t: float
    beta: float
    gamma: float


def ray_triangle_intersect(ray: Ray, tri: Triangle, eps: float = PARALLEL_EPS,
                           area_eps: float = 0.0) -> Hit | None:
    """Moller-Trumbore. ``None`` for misses, hits at t <= eps, and near-parallel rays.

    Edge and vertex grazes count as hits. Triangles with area <= ``area_eps``
    are skipped.
    """
    if area_eps > 0.0 and tri.area <= area_eps:
        return None
    o, d = ray.origin, ray.direction
    hit, t, b, g = kernels.mt_intersect(o[0], o[1], o[2], d[0], d[1], d[2],
                                        tri.v1, tri.v2 - tri.v1, tri.v3 - tri.v1, eps)
    if not hit:
        return None
    return Hit(float(t), float(b), float(g))


def barycentric_point(tri: Triangle, beta: float, gamma: float) -> np.ndarray:
    """(1 - beta - gamma) v1 + beta v2 + gamma v3."""
    if beta < 0.0 or gamma < 0.0 or beta + gamma > 1.0:
        raise PreconditionError(f"barycentric ({beta}, {gamma}) outside the simplex")
    return (1.0 - beta - gamma) * tri.v1 + beta * tri.v2 + gamma * tri.v3


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def matrix_to_6d(m: np.ndarray) -> np.ndarray:
    """First two columns, concatenated. Works on (..., 3, 3)."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def six_d_to_matrix(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Gram-Schmidt decode of (..., 6) into (..., 3, 3) rotation matrices."""
    v = np.asarray(v, dtype=np.float64)
    a1, a2 = v[..., :3], v[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n1 <= eps) or np.any(n2 <= eps):
        raise DegenerateRotation6D("6D half-vector has (near) zero norm")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    nu = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(nu <= eps * n2):
        raise DegenerateRotation6D("6D half-vectors are parallel")
    b2 = u2 / nu
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


class Rotation:
    """Proper 3D rotation stored as an orthonormal 3x3 matrix."""

    __slots__ = ("_m",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64).reshape(3, 3)
        m.setflags(write=False)
        self._m = m

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.eye(3))

    @classmethod
    def from_quat(cls, q_wxyz) -> Rotation:
        q = np.asarray(q_wxyz, dtype=np.float64)
        return cls(_ScipyRotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix())

    def as_quat(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z) with w >= 0."""
        x, y, z, w = _ScipyRotation.from_matrix(self._m).as_quat()
        q = np.array([w, x, y, z])
        return -q if q[0] < 0 else q

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> Rotation:
        axis = _vec3(axis)
        axis /= np.linalg.norm(axis)
        return cls(_ScipyRotation.from_rotvec(axis * angle_rad).as_matrix())

    @classmethod
    def from_rotvec(cls, rotvec) -> Rotation:
        return cls(_ScipyRotation.from_rotvec(_vec3(rotvec)).as_matrix())

    @classmethod
    def random(cls, rng: np.random.Generator) -> Rotation:
        """Uniform (Haar) sample via a normalized Gaussian quaternion."""
        q = rng.standard_normal(4)
        return cls.from_quat(q / np.linalg.norm(q))

    @classmethod
    def from_6d(cls, v) -> Rotation:
        return cls(six_d_to_matrix(np.asarray(v, dtype=np.float64).reshape(6)))

    def as_6d(self) -> np.ndarray:
        return matrix_to_6d(self._m)

    def inv(self) -> Rotation:
        return Rotation(self._m.T)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self._m.T

    def __matmul__(self, other: Rotation) -> Rotation:
        return Rotation(self._m @ other._m)

    def __repr__(self) -> str:
        return f"Rotation({self._m.tolist()!r})"


def rotation_to_6d(r: Rotation) -> np.ndarray:
    return r.as_6d()


def six_d_to_rotation(v) -> Rotation:
    return Rotation.from_6d(v)


def geodesic_angle_deg(r1: Rotation, r2: Rotation) -> float:
    """Angle of r1^T r2 in degrees, in [0, 180].

    Equal to arccos((trace - 1) / 2) but evaluated with atan2 on the
    symmetric and skew parts, which keeps full precision near 0 and 180.
    """
    m1 = r1.matrix if isinstance(r1, Rotation) else np.asarray(r1)
    m2 = r2.matrix if isinstance(r2, Rotation) else np.asarray(r2)
    return float(geodesic_angles_deg(m1, m2))


def geodesic_angles_deg(m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """Vectorized geodesic angle between stacks of matrices (..., 3, 3)."""
    rel = np.swapaxes(m1, -1, -2) @ m2
    tr = rel[..., 0, 0] + rel[..., 1, 1] + rel[..., 2, 2]
    sx = rel[..., 2, 1] - rel[..., 1, 2]
    sy = rel[..., 0, 2] - rel[..., 2, 0]
    sz = rel[..., 1, 0] - rel[..., 0, 1]
    s = 0.5 * np.sqrt(sx * sx + sy * sy + sz * sz)
    c = 0.5 * (tr - 1.0)
    return np.clip(np.degrees(np.arctan2(s, c)), 0.0, 180.0)


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidTransform:
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", _vec3(self.translation))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    def apply(self, points) -> np.ndarray:
        return self.rotation.apply(points) + self.translation

    def inverse(self) -> RigidTransform:
        rinv = self.rotation.inv()
        return RigidTransform(rinv, -rinv.apply(self.translation))

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation.apply(other.translation) + self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m


def kabsch_align(source, target, collinear_tol: float = 1e-9) -> RigidTransform:
    """Least-squares rigid transform T with T(source) ~ target.

    Raises AlignmentUnderdetermined for fewer than three pairs or a
    collinear source set.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise PreconditionError(f"shape mismatch {src.shape} vs {dst.shape}")
    if src.shape[0] < 3:
        raise AlignmentUnderdetermined(f"need at least 3 point pairs, got {src.shape[0]}")
    cs = src.mean(axis=0)
    ct = dst.mean(axis=0)
    a = src - cs
    b = dst - ct
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= collinear_tol * max(1.0, sv[0]):
        raise AlignmentUnderdetermined("source points are collinear")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    corr = np.diag([1.0, 1.0, d])
    r = vt.T @ corr @ u.T
    return RigidTransform(Rotation(r), ct - r @ cs)


def kabsch_align_batch(source, target, mask=None, collinear_tol: float = 1e-9):
    """Per-frame Kabsch over (N, K, 3) pairs using only pairs where ``mask`` is set.

    Returns rotations (N, 3, 3), translations (N, 3) and an ``ok`` flag per
    frame; frames that :func:`kabsch_align` would reject get the identity
    and ``ok = False`` instead of raising.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.broadcast_to(np.asarray(target, dtype=np.float64), src.shape)
    n, k = src.shape[:2]
    w = np.ones((n, k)) if mask is None else np.asarray(mask, dtype=np.float64)
    cnt = w.sum(axis=1)
    safe = np.maximum(cnt, 1.0)[:, None]
    cs = (w[..., None] * src).sum(axis=1) / safe
    ct = (w[..., None] * dst).sum(axis=1) / safe
    a = (src - cs[:, None]) * w[..., None]
    b = (dst - ct[:, None]) * w[..., None]
    sv = np.linalg.svd(a, compute_uv=False)
    ok = (cnt >= 3) & (sv[:, 0] > 0.0) & (sv[:, 1] > collinear_tol * np.maximum(1.0, sv[:, 0]))
    h = np.swapaxes(a, 1, 2) @ b
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0] = 1.0
    v[..., :, 2] *= d[:, None]
    r = v @ ut
    r[~ok] = np.eye(3)
    t = ct - np.einsum("nab,nb->na", r, cs)
    t[~ok] = 0.0
    return r, t, ok


def rmsd(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=-1))))
