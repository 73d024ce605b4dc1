"""Procedural toy scene: a skinned tube around a joint chain, watched by a small rig."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from . import io
from .dataset import MocapDataset, Sequence
from .errors import PreconditionError
from .kinematics import (Character, MarkerBinding, MarkerLayout, Skeleton, SkinnedMesh, fk_arrays,
                         marker_positions)
from .meshes import tube_along_chain
from .occlusion import Camera, CameraRig, corrupt, simulate_visibility

N_AROUND = 12
RINGS_PER_BONE = 4
# Around-the-tube angles (in units of 2 pi / N_AROUND) cycled through by limb markers.
_LIMB_SLOTS = (0, 6, 2, 10)
# Waist markers: front (+x), back (-x) and two flanks.
_WAIST_SLOTS = (0, 6, 2, 10)


@dataclass(frozen=True)
class ToyConfig:
    n_joints: int = 5
    n_markers: int = 12
    n_frames: int = 5000
    n_sequences: int = 20
    motion_richness: float = 1.0
    seed: int = 0
    bone_length: float = 0.2
    radius: float = 0.055
    frame_rate: float = 60.0
    rig: str = "one_side"
    occl_prob: float = 0.05
    shift_prob: float = 0.05
    shift_sigma: float = 0.01
    threads: int = 1

    def __post_init__(self):
        if self.n_joints < 2:
            raise PreconditionError("toy chain needs at least 2 joints")
        if self.n_markers < 4:
            raise PreconditionError("toy layout needs at least 4 markers")
        if self.n_sequences < 1 or self.n_frames < self.n_sequences:
            raise PreconditionError("need at least one frame per sequence")
        if self.rig not in RIGS:
            raise PreconditionError(f"unknown rig {self.rig!r}; choose from {sorted(RIGS)}")


def _one_side_rig(height: float) -> CameraRig:
    mid = (0.0, 0.5 * height, 0.0)
    return CameraRig((Camera((3.0, 0.3 * height, 0.6), mid), Camera((3.0, 0.7 * height, -0.6), mid)),
                     "one_side")


def _surround_rig(height: float) -> CameraRig:
    mid = (0.0, 0.5 * height, 0.0)
    cams = []
    for k in range(8):
        a = 2.0 * np.pi * k / 8
        cams.append(Camera((3.0 * np.cos(a), (0.3 + 0.4 * (k % 2)) * height, 3.0 * np.sin(a)), mid))
    return CameraRig(tuple(cams), "surround")


RIGS = {"one_side": _one_side_rig, "surround": _surround_rig}


def toy_rig(name: str, n_joints: int, bone_length: float) -> CameraRig:
    return RIGS[name](n_joints * bone_length)


def toy_character(n_joints: int = 5, n_markers: int = 12, bone_length: float = 0.2,
                  radius: float = 0.055) -> Character:
    """Chain along +y with a tube skin; a quarter of the markers (at least 4) ring the root bone."""
    skeleton = Skeleton.chain(n_joints, (0.0, bone_length, 0.0))
    _, joint_pos = skeleton.rest_globals
    end_site = joint_pos[-1] + np.array([0.0, bone_length, 0.0])
    verts, faces, weights, _ = tube_along_chain(joint_pos, end_site, radius, N_AROUND, RINGS_PER_BONE)
    mesh = SkinnedMesh(verts, faces, weights)

    n_waist = min(4, n_markers)
    n_limb = n_markers - n_waist
    n_bones = n_joints  # every joint drives one tube segment, the last one up to the end site

    def binding(name, bone, slot, height):
        ring = bone * RINGS_PER_BONE + height
        tri = 2 * (ring * N_AROUND + slot)  # the [a0, b0, b1] triangle whose a0 is ring vertex ``slot``
        return MarkerBinding(name, int(tri), 0.05, 0.05)

    markers = []
    waist_names = ("waist_front", "waist_back", "waist_left", "waist_right")
    for i in range(n_waist):
        markers.append(binding(waist_names[i], 0, _WAIST_SLOTS[i], RINGS_PER_BONE // 2))
    for k in range(n_limb):
        bone = 1 + (k * (n_bones - 1)) // max(n_limb, 1) if n_bones > 1 else 0
        slot = _LIMB_SLOTS[k % len(_LIMB_SLOTS)]
        markers.append(binding(f"limb{k:02d}_b{bone}", bone, slot, RINGS_PER_BONE // 2))
    return Character(skeleton, mesh, MarkerLayout(tuple(markers)))


def _smooth_angles(rng: np.random.Generator, n_frames: int, amplitude_deg, frame_rate: float):
    """Sum of two random sinusoids per channel, shape (n_frames, channels)."""
    amp = np.deg2rad(np.asarray(amplitude_deg, dtype=np.float64))
    t = np.arange(n_frames)[:, None] / frame_rate
    out = np.zeros((n_frames, amp.size))
    for _ in range(2):
        freq = rng.uniform(0.1, 0.6, amp.size)
        phase = rng.uniform(0.0, 2.0 * np.pi, amp.size)
        weight = rng.uniform(0.3, 0.7, amp.size)
        out += weight * np.sin(2.0 * np.pi * freq * t + phase)
    return out * amp


def toy_motion(rng: np.random.Generator, n_joints: int, n_frames: int, richness: float,
               frame_rate: float) -> io.MotionPayload:
    """Smooth random joint rotations; ``richness`` scales every amplitude."""
    root = _smooth_angles(rng, n_frames, [15.0, 30.0, 15.0], frame_rate)
    limbs = _smooth_angles(rng, n_frames, [35.0, 10.0, 35.0] * (n_joints - 1), frame_rate)
    rotvec = np.concatenate([root, limbs], axis=1).reshape(n_frames, n_joints, 3) * richness
    xyzw = ScipyRotation.from_rotvec(rotvec.reshape(-1, 3)).as_quat().reshape(n_frames, n_joints, 4)
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    q = np.where(q[..., :1] < 0, -q, q)
    trans = _smooth_angles(rng, n_frames, [3.0, 1.5, 3.0], frame_rate) * richness  # ~5 cm sway
    return io.MotionPayload(trans, q)


def generate_toy_dataset(config: ToyConfig | None = None, **overrides) -> MocapDataset:
    """Animate, skin, ray-trace and corrupt the toy chain; deterministic under ``config.seed``."""
    if config is None:
        config = ToyConfig(**overrides)
    elif overrides:
        config = ToyConfig(**{**asdict(config), **overrides})
    character = toy_character(config.n_joints, config.n_markers, config.bone_length, config.radius)
    rig = toy_rig(config.rig, config.n_joints, config.bone_length)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_sequences)
    base, extra = divmod(config.n_frames, config.n_sequences)
    sequences = []
    for i, ss in enumerate(seeds):
        n = base + (1 if i < extra else 0)
        motion_rng = np.random.default_rng(ss)
        payload = toy_motion(motion_rng, config.n_joints, n, config.motion_richness, config.frame_rate)
        motion = payload.to_motion()
        verts = character.vertices(motion)
        clean = marker_positions(character.layout, verts, character.mesh.triangles)
        mask = simulate_visibility(clean, verts, character.mesh.triangles, rig,
                                   frame_rate=config.frame_rate, threads=config.threads)
        _, joints = fk_arrays(character.skeleton, motion.root_translations, motion.rotations)
        c = corrupt(clean, mask.visible, config.occl_prob, config.shift_prob, config.shift_sigma,
                    rng_seed=int(motion_rng.integers(2**63)))
        observed = np.where(c.visibility[..., None], c.positions, 0.0)
        frames = io.FrameBlock(clean, observed, joints, c.visibility, c.shifted)
        sequences.append(Sequence(f"seq{i:04d}", payload, mask, frames))
    return MocapDataset(character, rig, character.tpose_frame(), sequences, config.frame_rate,
                        {"toy": asdict(config) | {"threads": 1}})
