"""In-memory dataset of solver frames and its on-disk container."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import io
from .errors import ParseError
from .kinematics import Character, MarkerFrame, Motion
from .occlusion import CameraRig, VisibilityMask, frame_occlusion_fraction


@dataclass
class Sequence:
    name: str
    payload: io.MotionPayload  # stored form; rotations are derived from it
    mask: VisibilityMask  # ray-traced co-visibility before random corruption
    frames: io.FrameBlock

    @cached_property
    def motion(self) -> Motion:
        return self.payload.to_motion()

    @property
    def n_frames(self) -> int:
        return self.frames.visible.shape[0]

    @property
    def occlusion_fractions(self) -> np.ndarray:
        return frame_occlusion_fraction(self.frames.visible)


@dataclass
class FrameBatch:
    """Flat per-frame arrays gathered from one or more sequences."""

    observed: np.ndarray  # (N, M, 3)
    visible: np.ndarray  # (N, M)
    clean: np.ndarray  # (N, M, 3)
    joints: np.ndarray  # (N, J, 3)
    rotations: np.ndarray  # (N, J, 3, 3) local joint rotations
    sequence: np.ndarray  # (N,) source sequence index
    parents: np.ndarray  # (J,) skeleton parent indices, -1 for the root

    def __len__(self) -> int:
        return self.observed.shape[0]

    def frame(self, i: int) -> MarkerFrame:
        """One observed frame as solver input (not yet centralized)."""
        return MarkerFrame(self.observed[i], self.visible[i])

    def subset(self, idx) -> FrameBatch:
        return FrameBatch(self.observed[idx], self.visible[idx], self.clean[idx],
                          self.joints[idx], self.rotations[idx], self.sequence[idx], self.parents)


@dataclass
class MocapDataset:
    character: Character
    rig: CameraRig
    tpose: MarkerFrame
    sequences: list[Sequence]
    frame_rate: float = 60.0
    generator: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return sum(s.n_frames for s in self.sequences)

    @property
    def key_marker_ids(self) -> list[int]:
        return list(self.character.key_marker_ids)

    def batch(self, sequence_ids=None) -> FrameBatch:
        ids = range(len(self.sequences)) if sequence_ids is None else sequence_ids
        seqs = [(i, self.sequences[i]) for i in ids]
        cat = np.concatenate
        return FrameBatch(
            cat([s.frames.observed for _, s in seqs]),
            cat([s.frames.visible for _, s in seqs]),
            cat([s.frames.clean for _, s in seqs]),
            cat([s.frames.joints for _, s in seqs]),
            cat([s.motion.rotations for _, s in seqs]),
            cat([np.full(s.n_frames, i) for i, s in seqs]),
            self.character.skeleton.parents,
        )

    def split(self, holdout: float = 0.2, seed: int = 0) -> tuple[list[int], list[int]]:
        """Sequence-level train/test split; whole sequences are held out."""
        n = len(self.sequences)
        n_test = max(1, int(round(holdout * n))) if n > 1 else 0
        perm = np.random.default_rng(seed).permutation(n)
        return sorted(perm[n_test:].tolist()), sorted(perm[:n_test].tolist())

    # -- container -----------------------------------------------------------

    def save(self, root) -> str:
        """Write the container and return its hash (sha256 of the manifest)."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        io.save_skeleton(root / "skeleton.json", self.character.skeleton)
        io.save_mesh(root / "mesh.json", self.character.mesh)
        io.save_layout(root / "layout.json", self.character.layout)
        io.save_rig(root / "rig.json", self.rig)
        io.save_tpose(root / "tpose.json", self.tpose, self.character.layout.names,
                      self.character.key_marker_ids)
        seq_meta = []
        for s in self.sequences:
            stem = f"sequences/{s.name}"
            io.save_motion(root / f"{stem}.mocp", s.payload)
            io.save_mask(root / f"{stem}.mask", s.mask)
            io.save_frames(root / f"{stem}.mfrm", s.frames)
            seq_meta.append({"name": s.name, "frames": s.n_frames, "motion": f"{stem}.mocp",
                             "mask": f"{stem}.mask", "frames_file": f"{stem}.mfrm"})
        files = ["skeleton.json", "mesh.json", "layout.json", "rig.json", "tpose.json"]
        for m in seq_meta:
            files += [m["motion"], m["mask"], m["frames_file"]]
        manifest = {
            "version": io.CONTAINER_VERSION,
            "counts": {"sequences": len(self.sequences), "frames": self.n_frames,
                       "markers": self.character.layout.n_markers,
                       "joints": self.character.skeleton.n_joints},
            "frame_rate": self.frame_rate,
            "generator": self.generator,
            "sequences": seq_meta,
            "hashes": {f: io.sha256_file(root / f) for f in files},
        }
        io.write_json(root / "manifest.json", manifest)
        return io.sha256_file(root / "manifest.json")

    @classmethod
    def load(cls, root, verify: bool = True) -> MocapDataset:
        root = Path(root)
        manifest = io.read_json(root / "manifest.json")
        if manifest.get("version") != io.CONTAINER_VERSION:
            raise ParseError(f"container version {manifest.get('version')!r}, "
                             f"expected {io.CONTAINER_VERSION!r}", path=root / "manifest.json")
        if verify:
            for f, h in manifest["hashes"].items():
                got = io.sha256_file(root / f)
                if got != h:
                    raise ParseError(f"hash mismatch for {f}: manifest {h[:12]}, file {got[:12]}",
                                     path=root / f)
        skeleton = io.load_skeleton(root / "skeleton.json")
        mesh = io.load_mesh(root / "mesh.json")
        layout = io.load_layout(root / "layout.json")
        tpose, keys = io.load_tpose(root / "tpose.json")
        character = Character(skeleton, mesh, layout, tuple(keys))
        seqs = [Sequence(m["name"], io.load_motion_payload(root / m["motion"]), io.load_mask(root / m["mask"]),
                         io.load_frames(root / m["frames_file"])) for m in manifest["sequences"]]
        return cls(character, io.load_rig(root / "rig.json"), tpose, seqs,
                   manifest["frame_rate"], manifest.get("generator", {}))


def container_hash(root) -> str:
    return io.sha256_file(Path(root) / "manifest.json")


def dataset_fingerprint(ds: MocapDataset) -> str:
    """Content hash of the solver-facing arrays, independent of any container on disk."""
    h = hashlib.sha256()
    h.update(json.dumps(ds.generator, sort_keys=True).encode())
    for s in ds.sequences:
        h.update(io.frames_to_bytes(s.frames))
    return h.hexdigest()
