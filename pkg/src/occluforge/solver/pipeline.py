"""Frame solving: centralize -> position solver -> T-pose alignment -> rotation solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ContractViolation, EmptyFrame
from ..geometry import Rotation, kabsch_align_batch
from ..kinematics import MarkerFrame
from .chain import ChainPropagation
from .models import MergedSolver, PositionSolver, RotationSolver
from .ops import DTYPE


def _t(x, dtype=DTYPE):
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)


def _np(x) -> np.ndarray:
    return x.detach().to(torch.float64).numpy()


def position_forward(model: PositionSolver, frame: MarkerFrame):
    """Complete one centralized frame; returns (markers M x 3, joints J x 3, ChainPropagation)."""
    if not frame.centroid_removed:
        raise ContractViolation("position solver expects a centralized frame")
    if not frame.visibility.any():
        raise EmptyFrame("no visible markers")
    with torch.no_grad():
        dt = model.cfg.torch_dtype
        m, j, attn = model(_t(frame.positions[None], dt), _t(frame.visibility[None], torch.bool))
    chain = ChainPropagation.from_attention([_np(a) for a in attn], 0, model.cfg.n_markers,
                                            model.cfg.n_joints)
    return _np(m[0]), _np(j[0]), chain


def rotation_forward(model: RotationSolver, markers, joints) -> list[Rotation]:
    """Aligned-frame orientations per joint from T-pose-aligned markers (M x 3) and joints (J x 3)."""
    with torch.no_grad():
        dt = model.cfg.torch_dtype
        r = model(_t(np.asarray(markers)[None], dt), _t(np.asarray(joints)[None], dt))
    return [Rotation(m) for m in _np(r[0])]


def align_frames(markers, tpose, key_ids, visible=None):
    """Rigidly map each frame's key markers onto the T-pose.

    Returns (R, t, ok). With ``visible`` given, only visible key markers are
    used and frames with fewer than three of them come back ``ok = False``.
    """
    key_ids = np.asarray(key_ids, dtype=np.int64)
    src = np.asarray(markers)[:, key_ids]
    mask = None if visible is None else np.asarray(visible)[:, key_ids]
    return kabsch_align_batch(src, np.asarray(tpose)[key_ids], mask)


def apply_rigid(r, t, points):
    return np.einsum("nab,nkb->nka", r, points) + t[:, None, :]


def local_to_global(rotations, parents):
    """Chain local rotations (N, J, 3, 3) into global orientations; parents precede children."""
    out = np.array(rotations, copy=True)
    for j, p in enumerate(parents):
        if p >= 0:
            out[:, j] = out[:, p] @ out[:, j]
    return out


def global_to_local(orientations, parents):
    out = np.array(orientations, copy=True)
    for j, p in enumerate(parents):
        if p >= 0:
            out[:, j] = np.swapaxes(orientations[:, p], -1, -2) @ orientations[:, j]
    return out


def aligned_targets(r_align, rotations, parents):
    """Rotation-solver targets: every joint's global orientation in the aligned frame."""
    return r_align[:, None] @ local_to_global(rotations, parents)


def locals_from_aligned(r_align, orientations, parents):
    """Undo ``aligned_targets``: back to world frame, then to local rotations."""
    return global_to_local(np.swapaxes(r_align, 1, 2)[:, None] @ orientations, parents)


def centralize_batch(observed, visible):
    """Centroid of visible markers per frame; frames with none are flagged, not raised."""
    vis = np.asarray(visible, dtype=bool)
    n = vis.sum(axis=1)
    ok = n > 0
    pos = np.where(vis[..., None], observed, 0.0)
    centroid = pos.sum(axis=1) / np.maximum(n, 1)[:, None]
    return np.where(vis[..., None], pos - centroid[:, None], 0.0), centroid, ok


@dataclass
class SolveResult:
    markers: np.ndarray  # (N, M, 3) world
    joints: np.ndarray  # (N, J, 3) world
    rotations: np.ndarray  # (N, J, 3, 3) local, root global
    failed: np.ndarray  # (N,) frames without a solution (NaN-filled)
    attention: list[np.ndarray] | None = None  # per decoder layer (N, V, V)


def _batches(n, size):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


@dataclass
class MocapSolver:
    """The decoupled pipeline."""

    position: PositionSolver
    rotation: RotationSolver
    tpose: np.ndarray
    key_ids: tuple[int, ...]
    parents: tuple[int, ...]

    def complete(self, observed, visible, batch: int = 1024, keep_attention: bool = False):
        """Position stage over many frames, in centralized coordinates."""
        c, centroid, ok = centralize_batch(observed, visible)
        n = c.shape[0]
        pm = np.zeros_like(c)
        pj = np.zeros((n, self.position.cfg.n_joints, 3))
        attn = None
        dt = self.position.cfg.torch_dtype
        with torch.no_grad():
            for sl in _batches(n, batch):
                m, j, a = self.position(_t(c[sl], dt), _t(visible[sl], torch.bool))
                pm[sl] = _np(m)
                pj[sl] = _np(j)
                if keep_attention:
                    attn = attn or [[] for _ in a]
                    for store, p in zip(attn, a):
                        store.append(_np(p))
        if attn is not None:
            attn = [np.concatenate(s) for s in attn]
        return pm, pj, centroid, ok, attn

    def rotations_from(self, markers, joints, batch: int = 1024):
        """Rotation stage on centralized completed frames; returns local rotations, root global."""
        r, t, _ = align_frames(markers, self.tpose, self.key_ids)
        am = apply_rigid(r, t, markers)
        aj = apply_rigid(r, t, joints)
        out = np.zeros(joints.shape[:2] + (3, 3))
        dt = self.rotation.cfg.torch_dtype
        with torch.no_grad():
            for sl in _batches(markers.shape[0], batch):
                out[sl] = _np(self.rotation(_t(am[sl], dt), _t(aj[sl], dt)))
        return locals_from_aligned(r, out, self.parents)

    def solve(self, observed, visible, batch: int = 1024, keep_attention: bool = False) -> SolveResult:
        observed = np.asarray(observed, dtype=np.float64)
        visible = np.asarray(visible, dtype=bool)
        pm, pj, centroid, ok, attn = self.complete(observed, visible, batch, keep_attention)
        rots = self.rotations_from(pm, pj, batch)
        markers = pm + centroid[:, None]
        joints = pj + centroid[:, None]
        failed = ~ok
        markers[failed] = np.nan
        joints[failed] = np.nan
        rots[failed] = np.nan
        return SolveResult(markers, joints, rots, failed, attn)


@dataclass
class MergedPipeline:
    """No-decouple ablation: align raw visible key markers first, then one network."""

    model: MergedSolver
    tpose: np.ndarray
    key_ids: tuple[int, ...]
    parents: tuple[int, ...]

    def solve(self, observed, visible, batch: int = 1024, keep_attention: bool = False) -> SolveResult:
        observed = np.asarray(observed, dtype=np.float64)
        visible = np.asarray(visible, dtype=bool)
        r, t, ok = align_frames(observed, self.tpose, self.key_ids, visible)
        aligned = np.where(visible[..., None], apply_rigid(r, t, observed), 0.0)
        n, m = visible.shape
        j = self.model.cfg.n_joints
        pm, pj = np.zeros((n, m, 3)), np.zeros((n, j, 3))
        rots = np.zeros((n, j, 3, 3))
        dt = self.model.cfg.torch_dtype
        with torch.no_grad():
            for sl in _batches(n, batch):
                a, b, c, _ = self.model(_t(aligned[sl], dt), _t(visible[sl], torch.bool))
                pm[sl], pj[sl], rots[sl] = _np(a), _np(b), _np(c)
        rt = np.swapaxes(r, 1, 2)
        markers = apply_rigid(rt, -np.einsum("nab,nb->na", rt, t), pm)
        joints = apply_rigid(rt, -np.einsum("nab,nb->na", rt, t), pj)
        rots = locals_from_aligned(r, rots, self.parents)
        failed = ~ok
        markers[failed] = np.nan
        joints[failed] = np.nan
        rots[failed] = np.nan
        return SolveResult(markers, joints, rots, failed, None)
