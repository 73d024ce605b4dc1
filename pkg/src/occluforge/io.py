"""File formats.

JSON for hand-edited inputs (skeleton, mesh, layout, rig, T-pose), fixed
little-endian binary for bulk frame data:

``MOCP`` motion
    magic, u32 version=1, u32 frames, u32 joints, then float64 per frame:
    root translation (3) followed by one wxyz quaternion (4) per joint.
``MASK`` visibility
    magic, u32 version=1, u32 frames, u32 markers, f64 frame rate, then
    frames x markers bits, row-major, MSB-first, zero-padded to a byte.
``MFRM`` solver frames
    magic, u32 version=1, u32 frames, u32 markers, u32 joints, then float64
    clean markers (F*M*3), observed markers (F*M*3), joints (F*J*3), then
    two packed bit planes: observed visibility and shifted flags (F*M each).
``OFCK`` checkpoint
    magic, u32 version=1, u64 header length, UTF-8 JSON header (config and
    the ordered list of named blocks with shapes), then float64 payloads.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .kinematics import Joint, MarkerBinding, MarkerFrame, MarkerLayout, Motion, Skeleton, SkinnedMesh
from .occlusion import Camera, CameraRig, OcclusionStats, VisibilityMask

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CONTAINER_VERSION = "OCCLUFORGE-1"
_F64 = np.dtype("<f8")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.pos, path) from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(path, header, rows) -> None:
    buf = _io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class _Reader:
    def __init__(self, data: bytes, path=None):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(
                f"truncated {what}: expected {n} bytes, got {len(self.data) - self.pos}",
                self.pos, self.path)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64(self, what: str) -> float:
        return struct.unpack("<d", self.take(8, what))[0]

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise ParseError(f"bad magic {got!r}, expected {expected!r}", 0, self.path)

    def version(self) -> None:
        at = self.pos
        v = self.u32("version")
        if v != FORMAT_VERSION:
            raise ParseError(f"unsupported version {v}, expected {FORMAT_VERSION}", at, self.path)

    def floats(self, count: int, what: str, finite: bool = True) -> np.ndarray:
        at = self.pos
        arr = np.frombuffer(self.take(8 * count, what), dtype=_F64).astype(np.float64)
        if finite:
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise ParseError(f"non-finite value in {what}", at + 8 * int(bad[0]), self.path)
        return arr

    def bits(self, count: int, what: str) -> np.ndarray:
        nbytes = (count + 7) // 8
        raw = np.frombuffer(self.take(nbytes, what), dtype=np.uint8)
        return np.unpackbits(raw, count=count).astype(bool)

    def end(self) -> None:
        if self.pos != len(self.data):
            raise ParseError(f"{len(self.data) - self.pos} trailing bytes", self.pos, self.path)


def _read_bytes(path_or_bytes):
    if isinstance(path_or_bytes, (bytes, bytearray)):
        return bytes(path_or_bytes), None
    with open(path_or_bytes, "rb") as fh:
        return fh.read(), path_or_bytes


# ---------------------------------------------------------------------------
# JSON formats
# ---------------------------------------------------------------------------


def skeleton_to_json(sk: Skeleton) -> dict:
    return {"joints": [{"name": j.name, "parent": j.parent, "offset": list(map(float, j.rest_offset))}
                       for j in sk.joints]}


def skeleton_from_json(obj) -> Skeleton:
    try:
        return Skeleton(tuple(Joint(str(j["name"]), j["parent"], tuple(float(x) for x in j["offset"]))
                              for j in obj["joints"]))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed skeleton: {exc!r}") from exc


def save_skeleton(path, sk: Skeleton) -> None:
    write_json(path, skeleton_to_json(sk))


def load_skeleton(path) -> Skeleton:
    return skeleton_from_json(read_json(path))


def mesh_to_json(mesh: SkinnedMesh) -> dict:
    return {
        "vertices": mesh.template_vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
        "skin_weights": [[[j, w] for j, w in row] for row in mesh.skin_weights],
    }


def mesh_from_json(obj) -> SkinnedMesh:
    try:
        v = np.asarray(obj["vertices"], dtype=np.float64).reshape(-1, 3)
        f = np.asarray(obj["triangles"], dtype=np.int64).reshape(-1, 3)
        w = obj.get("skin_weights")
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed mesh: {exc!r}") from exc
    if w is None:
        return SkinnedMesh.rigid(v, f)
    return SkinnedMesh(v, f, tuple(tuple((int(j), float(x)) for j, x in row) for row in w))


def load_obj(path) -> tuple[SkinnedMesh, int]:
    """OBJ subset: ``v`` and ``f`` records. Returns (mesh bound to joint 0, skipped record count)."""
    verts, faces = [], []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
                else:
                    skipped += 1
            except ValueError as exc:
                raise ParseError(f"bad OBJ record on line {lineno}: {exc}", lineno, path) from exc
    if skipped:
        log.warning("%s: skipped %d unsupported OBJ records", path, skipped)
    return SkinnedMesh.rigid(np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3)), skipped


def save_mesh(path, mesh: SkinnedMesh) -> None:
    write_json(path, mesh_to_json(mesh))


def load_mesh(path) -> SkinnedMesh:
    if str(path).lower().endswith(".obj"):
        return load_obj(path)[0]
    return mesh_from_json(read_json(path))


def layout_to_json(layout: MarkerLayout) -> dict:
    return {"markers": [{"name": m.name, "triangle": m.triangle, "beta": m.beta, "gamma": m.gamma}
                        for m in layout.markers]}


def layout_from_json(obj) -> MarkerLayout:
    try:
        return MarkerLayout(tuple(MarkerBinding(str(m["name"]), int(m["triangle"]), float(m["beta"]),
                                                float(m["gamma"])) for m in obj["markers"]))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed marker layout: {exc!r}") from exc


def save_layout(path, layout: MarkerLayout) -> None:
    write_json(path, layout_to_json(layout))


def load_layout(path) -> MarkerLayout:
    return layout_from_json(read_json(path))


def rig_to_json(rig: CameraRig) -> dict:
    cams = []
    for c in rig.cameras:
        d = {"position": list(map(float, c.position))}
        if c.look_at is not None:
            d["look_at"] = list(map(float, c.look_at))
        if c.fov_deg is not None:
            d["fov_deg"] = float(c.fov_deg)
        cams.append(d)
    return {"name": rig.name, "cameras": cams}


def rig_from_json(obj) -> CameraRig:
    try:
        cams = tuple(Camera(tuple(map(float, c["position"])),
                            tuple(map(float, c["look_at"])) if c.get("look_at") is not None else None,
                            c.get("fov_deg")) for c in obj["cameras"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed camera rig: {exc!r}") from exc
    return CameraRig(cams, obj.get("name", ""))


def save_rig(path, rig: CameraRig) -> None:
    write_json(path, rig_to_json(rig))


def load_rig(path) -> CameraRig:
    return rig_from_json(read_json(path))


def save_tpose(path, frame: MarkerFrame, names, key_marker_ids) -> None:
    write_json(path, {
        "markers": [{"name": n, "position": p.tolist()} for n, p in zip(names, frame.positions)],
        "key_markers": [int(i) for i in key_marker_ids],
    })


def load_tpose(path) -> tuple[MarkerFrame, list[int]]:
    obj = read_json(path)
    try:
        pos = np.array([m["position"] for m in obj["markers"]], dtype=np.float64)
        keys = [int(i) for i in obj["key_markers"]]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed T-pose file: {exc!r}", path=path) from exc
    return MarkerFrame.all_visible(pos), keys


# ---------------------------------------------------------------------------
# MOCP motion
# ---------------------------------------------------------------------------


@dataclass
class MotionPayload:
    """Motion as stored on disk: root translations (F, 3), quaternions wxyz (F, J, 4)."""

    root_translations: np.ndarray
    quaternions: np.ndarray

    @classmethod
    def from_motion(cls, motion: Motion) -> MotionPayload:
        from scipy.spatial.transform import Rotation as R

        f, j = motion.rotations.shape[:2]
        xyzw = R.from_matrix(motion.rotations.reshape(-1, 3, 3)).as_quat().reshape(f, j, 4)
        q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
        q = np.where(q[..., :1] < 0, -q, q)
        return cls(motion.root_translations.copy(), q)

    def to_motion(self) -> Motion:
        from scipy.spatial.transform import Rotation as R

        f, j = self.quaternions.shape[:2]
        q = self.quaternions.reshape(-1, 4)
        mats = R.from_quat(np.concatenate([q[:, 1:], q[:, :1]], axis=1)).as_matrix()
        return Motion(self.root_translations.copy(), mats.reshape(f, j, 3, 3))


def motion_to_bytes(m: MotionPayload) -> bytes:
    f, j = m.quaternions.shape[:2]
    rows = np.concatenate([m.root_translations.reshape(f, 3), m.quaternions.reshape(f, 4 * j)], axis=1)
    return b"MOCP" + struct.pack("<III", FORMAT_VERSION, f, j) + rows.astype(_F64).tobytes()


def motion_from_bytes(data: bytes, path=None) -> MotionPayload:
    r = _Reader(data, path)
    r.magic(b"MOCP")
    r.version()
    f = r.u32("frame count")
    j = r.u32("joint count")
    at = r.pos
    rows = r.floats(f * (3 + 4 * j), "motion payload").reshape(f, 3 + 4 * j)
    r.end()
    q = rows[:, 3:].reshape(f, j, 4).copy()
    norms = np.linalg.norm(q, axis=-1)
    dev = np.abs(norms - 1.0)
    if np.any(dev > 1e-6):
        k = int(np.flatnonzero(dev.ravel() > 1e-6)[0])
        fi, ji = divmod(k, j)
        raise ParseError(f"quaternion frame {fi} joint {ji} has norm {norms[fi, ji]:.9g}",
                         at + 8 * (fi * (3 + 4 * j) + 3 + 4 * ji), path)
    fix = dev > 1e-12
    q[fix] /= norms[fix][:, None]
    return MotionPayload(rows[:, :3].copy(), q)


def save_motion(path, motion: Motion | MotionPayload) -> None:
    if isinstance(motion, Motion):
        motion = MotionPayload.from_motion(motion)
    atomic_write_bytes(path, motion_to_bytes(motion))


def load_motion_payload(path) -> MotionPayload:
    data, p = _read_bytes(path)
    return motion_from_bytes(data, p)


def load_motion(path) -> Motion:
    return load_motion_payload(path).to_motion()


# ---------------------------------------------------------------------------
# MASK visibility
# ---------------------------------------------------------------------------


def mask_to_bytes(mask: VisibilityMask) -> bytes:
    f, m = mask.visible.shape
    head = b"MASK" + struct.pack("<IIId", FORMAT_VERSION, f, m, float(mask.frame_rate))
    return head + np.packbits(mask.visible.ravel()).tobytes()


def mask_from_bytes(data: bytes, path=None) -> VisibilityMask:
    r = _Reader(data, path)
    r.magic(b"MASK")
    r.version()
    f = r.u32("frame count")
    m = r.u32("marker count")
    rate = r.f64("frame rate")
    if not np.isfinite(rate):
        raise ParseError("non-finite frame rate", r.pos - 8, path)
    bits = r.bits(f * m, "mask bits")
    r.end()
    return VisibilityMask(bits.reshape(f, m), rate)


def save_mask(path, mask: VisibilityMask) -> None:
    atomic_write_bytes(path, mask_to_bytes(mask))


def load_mask(path) -> VisibilityMask:
    data, p = _read_bytes(path)
    return mask_from_bytes(data, p)


# ---------------------------------------------------------------------------
# MFRM solver frames
# ---------------------------------------------------------------------------


@dataclass
class FrameBlock:
    clean: np.ndarray  # (F, M, 3)
    observed: np.ndarray  # (F, M, 3)
    joints: np.ndarray  # (F, J, 3)
    visible: np.ndarray  # (F, M)
    shifted: np.ndarray  # (F, M)


def frames_to_bytes(b: FrameBlock) -> bytes:
    f, m = b.visible.shape
    j = b.joints.shape[1]
    # Occluded slots carry no meaning; store zeros so files hash stably.
    observed = np.where(b.visible[..., None], b.observed, 0.0)
    parts = [
        b"MFRM", struct.pack("<IIII", FORMAT_VERSION, f, m, j),
        b.clean.astype(_F64).tobytes(), observed.astype(_F64).tobytes(),
        b.joints.astype(_F64).tobytes(),
        np.packbits(b.visible.ravel()).tobytes(), np.packbits(b.shifted.ravel()).tobytes(),
    ]
    return b"".join(parts)


def frames_from_bytes(data: bytes, path=None) -> FrameBlock:
    r = _Reader(data, path)
    r.magic(b"MFRM")
    r.version()
    f = r.u32("frame count")
    m = r.u32("marker count")
    j = r.u32("joint count")
    clean = r.floats(f * m * 3, "clean markers").reshape(f, m, 3)
    obs = r.floats(f * m * 3, "observed markers").reshape(f, m, 3)
    joints = r.floats(f * j * 3, "joints").reshape(f, j, 3)
    vis = r.bits(f * m, "visibility bits").reshape(f, m)
    shifted = r.bits(f * m, "shift bits").reshape(f, m)
    r.end()
    return FrameBlock(clean, obs, joints, vis, shifted)


def save_frames(path, block: FrameBlock) -> None:
    atomic_write_bytes(path, frames_to_bytes(block))


def load_frames(path) -> FrameBlock:
    data, p = _read_bytes(path)
    return frames_from_bytes(data, p)


# ---------------------------------------------------------------------------
# OFCK checkpoints
# ---------------------------------------------------------------------------


def checkpoint_to_bytes(blocks: dict[str, np.ndarray], header: dict) -> bytes:
    names = list(blocks)
    meta = dict(header)
    meta["blocks"] = [{"name": n, "shape": list(np.shape(blocks[n]))} for n in names]
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(blocks[n], dtype=_F64).tobytes() for n in names)
    return b"OFCK" + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + payload


def checkpoint_from_bytes(data: bytes, path=None) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(data, path)
    r.magic(b"OFCK")
    r.version()
    n = r.u64("header length")
    at = r.pos
    try:
        meta = json.loads(r.take(n, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}", at, path) from exc
    blocks = {}
    for b in meta.get("blocks", []):
        shape = tuple(b["shape"])
        size = int(np.prod(shape)) if shape else 1
        blocks[b["name"]] = r.floats(size, f"block {b['name']}").reshape(shape)
    r.end()
    return blocks, meta


def save_checkpoint(path, blocks, header) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(blocks, header))


def load_checkpoint(path):
    data, p = _read_bytes(path)
    return checkpoint_from_bytes(data, p)


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------


def stats_rows(stats: OcclusionStats, names=None):
    names = names or stats.marker_names or [f"m{i}" for i in range(len(stats.probability))]
    for m, name in enumerate(names):
        for b, label in enumerate(stats.bin_labels):
            yield [name, float(stats.probability[m]), label, int(stats.histogram[m, b])]


def save_stats_csv(path, stats: OcclusionStats, names=None) -> None:
    write_csv(path, ["marker_name", "occl_prob", "run_length_bin", "count"], stats_rows(stats, names))


def load_stats_csv(path) -> OcclusionStats:
    rows = read_csv(path)
    names: list[str] = []
    prob: dict[str, float] = {}
    labels: list[str] = []
    counts: dict[tuple[str, str], int] = {}
    for row in rows:
        n = row["marker_name"]
        if n not in prob:
            names.append(n)
            prob[n] = float(row["occl_prob"])
        if row["run_length_bin"] not in labels:
            labels.append(row["run_length_bin"])
        counts[n, row["run_length_bin"]] = int(row["count"])
    hist = np.array([[counts.get((n, b), 0) for b in labels] for n in names], dtype=np.int64)
    return OcclusionStats(np.array([prob[n] for n in names]), [], hist, labels, names)
