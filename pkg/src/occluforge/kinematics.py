"""Skeletons, forward kinematics, linear blend skinning, and marker placement."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import EmptyFrame, PreconditionError
from .geometry import RigidTransform, Rotation, kabsch_align


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int | None
    rest_offset: tuple[float, float, float]


@dataclass(frozen=True)
class Skeleton:
    joints: tuple[Joint, ...]

    def __post_init__(self):
        joints = tuple(self.joints)
        object.__setattr__(self, "joints", joints)
        if not joints:
            raise PreconditionError("skeleton needs at least one joint")
        roots = [i for i, j in enumerate(joints) if j.parent is None]
        if roots != [0]:
            raise PreconditionError(f"exactly one root at index 0 required, got roots {roots}")
        for i, j in enumerate(joints[1:], start=1):
            if not 0 <= j.parent < i:
                raise PreconditionError(f"joint {i} ({j.name}): parent {j.parent} must precede it")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @cached_property
    def parents(self) -> np.ndarray:
        return np.array([-1 if j.parent is None else j.parent for j in self.joints])

    @cached_property
    def offsets(self) -> np.ndarray:
        out = np.array([j.rest_offset for j in self.joints], dtype=np.float64).reshape(-1, 3)
        out.setflags(write=False)
        return out

    @cached_property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    @cached_property
    def rest_globals(self) -> tuple[np.ndarray, np.ndarray]:
        """Rest-pose global rotations and translations, computed once."""
        rots = np.broadcast_to(np.eye(3), (self.n_joints, 3, 3))
        gr, gt = fk_arrays(self, np.zeros(3), rots)
        gr.setflags(write=False)
        gt.setflags(write=False)
        return gr, gt

    @property
    def total_length(self) -> float:
        """Sum of child bone lengths (root offset excluded)."""
        return float(np.linalg.norm(self.offsets[1:], axis=1).sum())

    @classmethod
    def chain(cls, n_joints: int, bone=(0.0, 0.2, 0.0), prefix="j") -> Skeleton:
        joints = [Joint(f"{prefix}0", None, (0.0, 0.0, 0.0))]
        joints += [Joint(f"{prefix}{i}", i - 1, tuple(bone)) for i in range(1, n_joints)]
        return cls(tuple(joints))


@dataclass
class Pose:
    root_translation: np.ndarray
    joint_rotations: np.ndarray  # (J, 3, 3), local to parent

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 3, 3)

    @classmethod
    def identity(cls, n_joints: int) -> Pose:
        return cls(np.zeros(3), np.tile(np.eye(3), (n_joints, 1, 1)))

    def rotation(self, j: int) -> Rotation:
        return Rotation(self.joint_rotations[j])


@dataclass
class Motion:
    """A sequence of poses: root_translations (F, 3), rotations (F, J, 3, 3)."""

    root_translations: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        self.root_translations = np.asarray(self.root_translations, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.root_translations.shape[0] != self.rotations.shape[0]:
            raise PreconditionError("frame count mismatch between translations and rotations")

    @property
    def n_frames(self) -> int:
        return self.rotations.shape[0]

    def pose(self, f: int) -> Pose:
        return Pose(self.root_translations[f], self.rotations[f])


def fk_arrays(skeleton: Skeleton, root_translation, rotations):
    """Batched forward kinematics.

    ``rotations`` is (..., J, 3, 3) local rotations; returns global rotations
    (..., J, 3, 3) and joint positions (..., J, 3). Each child's rest offset
    is expressed in its parent's rotated frame.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    root_translation = np.asarray(root_translation, dtype=np.float64)
    n = skeleton.n_joints
    if rotations.shape[-3] != n:
        raise PreconditionError(f"pose has {rotations.shape[-3]} rotations, skeleton has {n} joints")
    gr = np.empty_like(rotations)
    gt = np.empty(rotations.shape[:-1], dtype=np.float64)
    offs = skeleton.offsets
    for j, p in enumerate(skeleton.parents):
        if p < 0:
            gr[..., j, :, :] = rotations[..., j, :, :]
            gt[..., j, :] = root_translation + offs[j]
        else:
            gr[..., j, :, :] = gr[..., p, :, :] @ rotations[..., j, :, :]
            gt[..., j, :] = gt[..., p, :] + np.einsum("...ab,b->...a", gr[..., p, :, :], offs[j])
    return gr, gt


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> tuple[list[RigidTransform], np.ndarray]:
    """Global transform per joint and the (J, 3) joint positions."""
    gr, gt = fk_arrays(skeleton, pose.root_translation, pose.joint_rotations)
    transforms = [RigidTransform(Rotation(gr[j]), gt[j]) for j in range(skeleton.n_joints)]
    return transforms, gt


# ---------------------------------------------------------------------------
# Skinning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkinnedMesh:
    template_vertices: np.ndarray
    triangles: np.ndarray
    skin_weights: tuple[tuple[tuple[int, float], ...], ...]

    def __post_init__(self):
        v = np.asarray(self.template_vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        w = tuple(tuple((int(j), float(x)) for j, x in row) for row in self.skin_weights)
        if len(w) != len(v):
            raise PreconditionError(f"{len(w)} weight rows for {len(v)} vertices")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise PreconditionError("triangle index out of range")
        for i, row in enumerate(w):
            if any(x < 0 for _, x in row) or abs(sum(x for _, x in row) - 1.0) > 1e-6:
                raise PreconditionError(f"vertex {i}: weights must be >= 0 and sum to 1")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "template_vertices", v)
        object.__setattr__(self, "triangles", f)
        object.__setattr__(self, "skin_weights", w)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    def dense_weights(self, n_joints: int) -> np.ndarray:
        w = np.zeros((self.n_vertices, n_joints))
        for i, row in enumerate(self.skin_weights):
            for j, x in row:
                if j >= n_joints:
                    raise PreconditionError(f"vertex {i} weights joint {j} >= {n_joints}")
                w[i, j] += x
        return w

    @classmethod
    def rigid(cls, vertices, triangles) -> SkinnedMesh:
        """Every vertex bound to joint 0."""
        v = np.asarray(vertices)
        return cls(v, triangles, tuple(((0, 1.0),) for _ in range(len(v))))


def skinning_matrices(skeleton: Skeleton, root_translations, rotations):
    """Per-joint (R, t) of G_j B_j^-1 for batched poses."""
    gr, gt = fk_arrays(skeleton, root_translations, rotations)
    br, bt = skeleton.rest_globals
    brt = np.swapaxes(br, -1, -2)
    r = gr @ brt
    t = gt - np.einsum("...jab,jb->...ja", r, bt)
    return r, t


def lbs_vertices(mesh: SkinnedMesh, skeleton: Skeleton, root_translations, rotations,
                 weights: np.ndarray | None = None) -> np.ndarray:
    """Linear blend skinning, batched over any leading pose axes."""
    if weights is None:
        weights = mesh.dense_weights(skeleton.n_joints)
    r, t = skinning_matrices(skeleton, root_translations, rotations)
    v = mesh.template_vertices
    # per joint image of every vertex, then blend: sum_j w_vj (R_j v + t_j)
    blended_r = np.einsum("vj,...jab->...vab", weights, r)
    blended_t = np.einsum("vj,...ja->...va", weights, t)
    return np.einsum("...vab,vb->...va", blended_r, v) + blended_t


def lbs_deform(mesh: SkinnedMesh, skeleton: Skeleton, pose: Pose) -> np.ndarray:
    return lbs_vertices(mesh, skeleton, pose.root_translation, pose.joint_rotations)


# ---------------------------------------------------------------------------
# Markers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarkerBinding:
    name: str
    triangle: int
    beta: float
    gamma: float


@dataclass(frozen=True)
class MarkerLayout:
    markers: tuple[MarkerBinding, ...]

    def __post_init__(self):
        markers = tuple(self.markers)
        object.__setattr__(self, "markers", markers)
        if not markers:
            raise PreconditionError("layout needs at least one marker")
        for m in markers:
            if m.beta < 0 or m.gamma < 0 or m.beta + m.gamma > 1:
                raise PreconditionError(f"marker {m.name}: barycentric outside the simplex")

    @property
    def n_markers(self) -> int:
        return len(self.markers)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.markers]

    def key_marker_ids(self, tag: str = "waist") -> list[int]:
        return [i for i, m in enumerate(self.markers) if tag in m.name.lower()]

    def validate_against(self, mesh: SkinnedMesh) -> None:
        n = mesh.triangles.shape[0]
        for m in self.markers:
            if not 0 <= m.triangle < n:
                raise PreconditionError(f"marker {m.name}: triangle {m.triangle} out of range")

    @cached_property
    def _arrays(self):
        tri = np.array([m.triangle for m in self.markers], dtype=np.int64)
        bg = np.array([[m.beta, m.gamma] for m in self.markers], dtype=np.float64)
        return tri, bg


@dataclass
class MarkerFrame:
    positions: np.ndarray
    visibility: np.ndarray
    centroid_removed: bool = False

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        if self.positions.shape[0] != self.visibility.shape[0]:
            raise PreconditionError("positions and visibility disagree on marker count")

    @property
    def n_markers(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def all_visible(cls, positions) -> MarkerFrame:
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        return cls(p, np.ones(p.shape[0], dtype=bool))


def marker_positions(layout: MarkerLayout, vertices, triangles) -> np.ndarray:
    """Barycentric marker positions, batched over leading axes of ``vertices``."""
    tri_idx, bg = layout._arrays
    f = np.asarray(triangles)[tri_idx]
    v = np.asarray(vertices, dtype=np.float64)
    v1, v2, v3 = v[..., f[:, 0], :], v[..., f[:, 1], :], v[..., f[:, 2], :]
    b = bg[:, 0:1]
    g = bg[:, 1:2]
    return (1.0 - b - g) * v1 + b * v2 + g * v3


def markers_from_mesh(layout: MarkerLayout, vertices, triangles) -> MarkerFrame:
    return MarkerFrame.all_visible(marker_positions(layout, vertices, triangles))


def centralize(frame: MarkerFrame) -> tuple[MarkerFrame, np.ndarray]:
    """Subtract the centroid of the visible markers from the visible markers."""
    vis = frame.visibility
    if not vis.any():
        raise EmptyFrame("no visible markers to centralize")
    centroid = frame.positions[vis].mean(axis=0)
    pos = frame.positions.copy()
    pos[vis] -= centroid
    return replace(frame, positions=pos, visibility=vis.copy(), centroid_removed=True), centroid


def centralize_arrays(positions: np.ndarray, visibility: np.ndarray):
    """Batched centralize over (..., M, 3). Frames without visible markers raise EmptyFrame."""
    vis = np.asarray(visibility, dtype=bool)
    n = vis.sum(axis=-1, keepdims=True)
    if np.any(n == 0):
        raise EmptyFrame("frame with no visible markers")
    pos = np.where(vis[..., None], positions, 0.0)
    centroid = pos.sum(axis=-2) / n
    out = np.where(vis[..., None], positions - centroid[..., None, :], 0.0)
    return out, centroid


def align_to_tpose(frame: MarkerFrame, key_marker_ids, tpose_reference: MarkerFrame):
    """Rigidly register the frame's key markers onto the T-pose reference.

    Only visible key markers are used, so a completed frame always aligns
    while a raw occluded one may raise AlignmentUnderdetermined.
    """
    ids = np.asarray(list(key_marker_ids), dtype=np.int64)
    usable = ids[frame.visibility[ids] & tpose_reference.visibility[ids]]
    transform = kabsch_align(frame.positions[usable], tpose_reference.positions[usable])
    aligned = replace(frame, positions=transform.apply(frame.positions),
                      visibility=frame.visibility.copy())
    return aligned, transform


@dataclass(frozen=True)
class Character:
    """Everything needed to animate a body and read its markers."""

    skeleton: Skeleton
    mesh: SkinnedMesh
    layout: MarkerLayout
    key_marker_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.layout.validate_against(self.mesh)
        if not self.key_marker_ids:
            object.__setattr__(self, "key_marker_ids", tuple(self.layout.key_marker_ids()))

    @cached_property
    def weights(self) -> np.ndarray:
        return self.mesh.dense_weights(self.skeleton.n_joints)

    def vertices(self, motion: Motion) -> np.ndarray:
        return lbs_vertices(self.mesh, self.skeleton, motion.root_translations,
                            motion.rotations, self.weights)

    def tpose_frame(self) -> MarkerFrame:
        return markers_from_mesh(self.layout, self.mesh.template_vertices, self.mesh.triangles)
