"""Ray-traced marker visibility and occlusion-pattern statistics.

A marker is reconstructible in a frame only when at least ``min_cameras``
cameras have an unobstructed line of sight to it. Everything else in this
module (random corruption, per-marker statistics, rig ranking by KL
divergence, oversampling, severity buckets) builds on the resulting mask.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import EmptyMesh, NothingToOversample, PreconditionError
from .geometry import PARALLEL_EPS, Hit, Ray

SKIN_EPS = 1e-4
DEFAULT_BUCKETS = (0.05, 0.10, 0.15, 0.20)
# Upper edges (inclusive) of the run-length histogram bins, in frames.
RUN_LENGTH_BINS = (1, 2, 4, 9, 19, 49, 99)


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float] | None = None
    fov_deg: float | None = None

    def __post_init__(self):
        if self.fov_deg is not None and not 0.0 < self.fov_deg <= 180.0:
            raise PreconditionError(f"fov_deg must be in (0, 180], got {self.fov_deg}")
        if self.fov_deg is not None and self.look_at is None:
            raise PreconditionError("fov_deg requires look_at")

    def in_fov(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if self.fov_deg is None:
            return np.ones(points.shape[:-1], dtype=bool)
        pos = np.asarray(self.position)
        axis = np.asarray(self.look_at) - pos
        axis = axis / np.linalg.norm(axis)
        v = points - pos
        n = np.linalg.norm(v, axis=-1)
        cos = np.einsum("...k,k->...", v, axis) / np.where(n > 0, n, 1.0)
        return cos >= math.cos(math.radians(self.fov_deg / 2.0)) - 1e-12


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if len(self.cameras) < 2:
            raise PreconditionError("a camera rig needs at least two cameras")

    @property
    def positions(self) -> np.ndarray:
        return np.array([c.position for c in self.cameras], dtype=np.float64)


@dataclass
class VisibilityMask:
    visible: np.ndarray  # (frames, markers) bool
    frame_rate: float = 120.0

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.visible.ndim != 2:
            raise PreconditionError("visibility mask must be frames x markers")

    @property
    def shape(self):
        return self.visible.shape

    @property
    def occluded(self) -> np.ndarray:
        return ~self.visible


@dataclass
class OcclusionStats:
    probability: np.ndarray  # (markers,)
    runs: list[np.ndarray]  # per marker: lengths of maximal occluded runs
    histogram: np.ndarray  # (markers, bins)
    bin_labels: list[str] = field(default_factory=list)
    marker_names: list[str] | None = None

    def distribution(self) -> np.ndarray:
        """Occlusion probability as a distribution over markers."""
        return np.asarray(self.probability, dtype=np.float64)

    @property
    def mean_run_length(self) -> np.ndarray:
        return np.array([r.mean() if len(r) else 0.0 for r in self.runs])


# ---------------------------------------------------------------------------
# BVH
# ---------------------------------------------------------------------------


class BvhAccel:
    """AABB tree over one frame's triangles.

    ``tests`` accumulates the number of ray/triangle tests performed by
    queries, for checking that pruning does what it should.
    """

    def __init__(self, vertices, triangles, max_leaf: int = 8):
        v = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(triangles, dtype=np.int64).reshape(-1, 3)
        if f.shape[0] == 0 or v.shape[0] == 0:
            raise EmptyMesh("cannot build a BVH over an empty mesh")
        if max_leaf < 1:
            raise PreconditionError("max_leaf must be >= 1")
        self.vertices = v
        self.triangles = f
        self.max_leaf = max_leaf
        self.v0, self.e1, self.e2 = kernels.triangle_edges(v, f)
        (self.node_min, self.node_max, self.left, self.right,
         self.start, self.count, self.order) = kernels.build_bvh_arrays(v, f, max_leaf)
        self.tests = 0

    @property
    def n_nodes(self) -> int:
        return self.left.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def is_leaf(self, node: int) -> bool:
        return bool(self.count[node] > 0)

    def _tree(self):
        return (self.node_min, self.node_max, self.left, self.right,
                self.start, self.count, self.order)

    def closest_hit(self, ray: Ray, tmax: float = np.inf,
                    eps: float = PARALLEL_EPS) -> tuple[int, Hit] | None:
        tri, t, b, g, n = kernels.bvh_closest(ray.origin, ray.direction, tmax, self.v0,
                                              self.e1, self.e2, *self._tree(), eps)
        self.tests += int(n)
        if tri < 0:
            return None
        return int(tri), Hit(float(t), float(b), float(g))

    def closest_hits(self, origins, dirs, tmax=None, eps: float = PARALLEL_EPS):
        """Batched nearest hit. Returns (tri (N,), tbg (N, 3)); tri == -1 on miss."""
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        if tmax is None:
            tmax = np.full(origins.shape[0], np.inf)
        tri, tbg, tests = kernels.bvh_closest_batch(origins, dirs, np.asarray(tmax, np.float64),
                                                    self.v0, self.e1, self.e2, *self._tree(), eps)
        self.tests += int(tests.sum())
        return tri, tbg

    def brute_force_hits(self, origins, dirs, tmax=None, eps: float = PARALLEL_EPS):
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        if tmax is None:
            tmax = np.full(origins.shape[0], np.inf)
        return kernels.brute_closest_batch(origins, dirs, np.asarray(tmax, np.float64),
                                           self.v0, self.e1, self.e2, eps)

    def visibility(self, cams, markers, skin_eps: float = SKIN_EPS,
                   eps: float = PARALLEL_EPS) -> np.ndarray:
        """(C, M) line-of-sight booleans."""
        cams = np.ascontiguousarray(cams, dtype=np.float64)
        markers = np.ascontiguousarray(markers, dtype=np.float64)
        if kernels.USE_NUMBA:
            return kernels.visibility_bvh(cams, markers, skin_eps, self.v0, self.e1, self.e2,
                                          *self._tree(), eps)
        return kernels.visibility_numpy(cams, markers, skin_eps, self.v0, self.e1, self.e2, eps)


def build_bvh(vertices, triangles, max_leaf: int = 8) -> BvhAccel:
    return BvhAccel(vertices, triangles, max_leaf)


def camera_sees_marker(camera: Camera, marker_pos, accel: BvhAccel,
                       skin_eps: float = SKIN_EPS) -> bool:
    """True iff no mesh hit lies closer than the marker (less the skin epsilon)."""
    p = np.asarray(marker_pos, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise PreconditionError("marker position must be finite")
    if not camera.in_fov(p):
        return False
    o = np.asarray(camera.position, dtype=np.float64)
    dist = float(np.linalg.norm(p - o))
    if dist <= skin_eps:
        return True
    return accel.closest_hit(Ray(o, p - o), tmax=dist - skin_eps) is None


# ---------------------------------------------------------------------------
# Visibility simulation
# ---------------------------------------------------------------------------


def camera_visibility(marker_frames, vertex_frames, triangles, rig: CameraRig,
                      skin_eps: float = SKIN_EPS, max_leaf: int = 8,
                      threads: int = 1) -> np.ndarray:
    """Per-camera line of sight, shape (frames, cameras, markers)."""
    markers = np.asarray(marker_frames, dtype=np.float64)
    verts = np.asarray(vertex_frames, dtype=np.float64)
    if markers.shape[0] != verts.shape[0]:
        raise PreconditionError(f"{markers.shape[0]} marker frames vs {verts.shape[0]} mesh frames")
    cams = rig.positions
    fov = np.stack([c.in_fov(markers) for c in rig.cameras], axis=1)

    def one(f):
        accel = BvhAccel(verts[f], triangles, max_leaf)
        return accel.visibility(cams, markers[f], skin_eps)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            sight = list(pool.map(one, range(markers.shape[0])))
    else:
        sight = [one(f) for f in range(markers.shape[0])]
    sight = np.stack(sight) if sight else np.zeros((0, len(cams), markers.shape[1]), bool)
    return sight & fov


def simulate_visibility(marker_frames, vertex_frames, triangles, rig: CameraRig,
                        min_cameras: int = 2, skin_eps: float = SKIN_EPS,
                        frame_rate: float = 120.0, threads: int = 1) -> VisibilityMask:
    """Marker visible iff at least ``min_cameras`` cameras see it."""
    sight = camera_visibility(marker_frames, vertex_frames, triangles, rig, skin_eps,
                              threads=threads)
    return VisibilityMask(sight.sum(axis=1) >= min_cameras, frame_rate)


# ---------------------------------------------------------------------------
# Random corruption
# ---------------------------------------------------------------------------


@dataclass
class CorruptedSequence:
    positions: np.ndarray  # (F, M, 3) observed
    visibility: np.ndarray  # (F, M) observed
    clean_positions: np.ndarray  # (F, M, 3) ground truth
    occluded: np.ndarray  # (F, M) ground-truth occlusion record (input ~visibility)
    shifted: np.ndarray  # (F, M) markers displaced by noise
    shifts: np.ndarray  # (F, M, 3) offsets applied


def corrupt(positions, visibility=None, occl_prob: float = 0.05, shift_prob: float = 0.05,
            shift_sigma: float = 0.01, rng_seed: int = 0) -> CorruptedSequence:
    """Random per-marker occlusion and Gaussian displacement.

    Independently per frame and marker: occlude with ``occl_prob``, otherwise
    shift with ``shift_prob`` by N(0, shift_sigma^2) per axis. Markers already
    invisible stay invisible and untouched.
    """
    for name, p in (("occl_prob", occl_prob), ("shift_prob", shift_prob)):
        if not 0.0 <= p <= 1.0:
            raise PreconditionError(f"{name} must be in [0, 1], got {p}")
    pos = np.asarray(positions, dtype=np.float64)
    vis = np.ones(pos.shape[:2], bool) if visibility is None else np.asarray(visibility, bool)
    rng = np.random.default_rng(rng_seed)
    u_occ = rng.random(vis.shape)
    u_shift = rng.random(vis.shape)
    noise = rng.standard_normal(pos.shape) * shift_sigma
    drop = vis & (u_occ < occl_prob)
    shifted = vis & ~drop & (u_shift < shift_prob)
    shifts = np.where(shifted[..., None], noise, 0.0)
    out = pos.copy()
    out[shifted] += noise[shifted]
    new_vis = vis & ~drop
    return CorruptedSequence(out, new_vis, pos.copy(), ~new_vis, shifted, shifts)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def _bin_labels(edges=RUN_LENGTH_BINS) -> list[str]:
    labels = []
    lo = 1
    for hi in edges:
        labels.append(str(hi) if hi == lo else f"{lo}-{hi}")
        lo = hi + 1
    labels.append(f"{lo}+")
    return labels


def occluded_runs(occluded_col: np.ndarray) -> np.ndarray:
    """Lengths of maximal runs of True."""
    x = np.concatenate([[0], np.asarray(occluded_col, dtype=np.int8), [0]])
    d = np.diff(x)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return ends - starts


def occlusion_stats(mask: VisibilityMask, marker_names=None,
                    bins=RUN_LENGTH_BINS) -> OcclusionStats:
    occ = mask.occluded
    if occ.size == 0:
        raise PreconditionError("empty visibility mask")
    prob = occ.mean(axis=0)
    runs = [occluded_runs(occ[:, m]) for m in range(occ.shape[1])]
    edges = np.asarray(bins)
    hist = np.zeros((occ.shape[1], len(edges) + 1), dtype=np.int64)
    for m, r in enumerate(runs):
        if len(r):
            hist[m] = np.bincount(np.searchsorted(edges, r, side="left"), minlength=len(edges) + 1)
    return OcclusionStats(prob, runs, hist, _bin_labels(bins), marker_names)


def kl_divergence(p, q, smoothing: float = 1e-9) -> float:
    """KL(p || q) in nats after additive smoothing and renormalization."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise PreconditionError(f"support mismatch: {p.size} vs {q.size}")
    if smoothing <= 0:
        raise PreconditionError("smoothing must be > 0")
    if np.any(p < 0) or np.any(q < 0):
        raise PreconditionError("distributions must be non-negative")
    p = (p + smoothing) / (p + smoothing).sum()
    q = (q + smoothing) / (q + smoothing).sum()
    return max(0.0, float(np.sum(p * np.log(p / q))))


@dataclass
class Scene:
    """One animated sequence to ray-trace: markers and mesh per frame."""

    marker_frames: np.ndarray
    vertex_frames: np.ndarray
    triangles: np.ndarray


def select_camera_rigs(candidates, scenes, reference_stats: OcclusionStats, k: int,
                       order: str = "lowest", min_cameras: int = 2, smoothing: float = 1e-9,
                       threads: int = 1):
    """Rank candidate rigs by KL(reference || candidate) of marker occlusion profiles.

    Returns ``[(index, rig, divergence), ...]`` of length ``k``.
    """
    if order not in ("lowest", "highest"):
        raise PreconditionError(f"order must be 'lowest' or 'highest', got {order!r}")
    if not 0 < k <= len(candidates):
        raise PreconditionError(f"k={k} outside 1..{len(candidates)}")
    scored = []
    for i, rig in enumerate(candidates):
        masks = [simulate_visibility(s.marker_frames, s.vertex_frames, s.triangles, rig,
                                     min_cameras, threads=threads).visible for s in scenes]
        stats = occlusion_stats(VisibilityMask(np.concatenate(masks, axis=0)))
        div = kl_divergence(reference_stats.distribution(), stats.distribution(), smoothing)
        scored.append((i, rig, div))
    sign = 1.0 if order == "lowest" else -1.0
    scored.sort(key=lambda x: (sign * x[2], x[0]))
    return scored[:k]


def frame_occlusion_fraction(visible) -> np.ndarray:
    """Fraction of occluded markers per frame."""
    v = visible.visible if isinstance(visible, VisibilityMask) else np.asarray(visible, bool)
    return (~v).mean(axis=1)


def oversample(dataset, occlusion_fractions, occlusion_threshold: float, target_ratio: float,
               rng_seed: int = 0, max_factor: int = 10_000):
    """Duplicate heavily occluded sequences until they make up ``target_ratio``.

    ``occlusion_fractions[i]`` is the mean per-frame occluded-marker fraction
    of ``dataset[i]``. Originals are kept in order; duplicates, drawn with
    replacement from the qualifying set, are appended.
    Returns (resampled list, source indices).
    """
    if not 0.0 < target_ratio < 1.0:
        raise PreconditionError("target_ratio must be in (0, 1)")
    fr = np.asarray(occlusion_fractions, dtype=np.float64)
    if len(fr) != len(dataset):
        raise PreconditionError("one occlusion fraction per sequence required")
    heavy = np.flatnonzero(fr >= occlusion_threshold)
    if heavy.size == 0:
        raise NothingToOversample(f"no sequence reaches occlusion fraction {occlusion_threshold}")
    n = len(dataset)
    h = heavy.size
    light = n - h
    if h / n >= target_ratio:
        return list(dataset), list(range(n))
    need = math.ceil(target_ratio * light / (1.0 - target_ratio))
    while need > 0 and (need - 1) / (light + need - 1) >= target_ratio:
        need -= 1
    while need / (light + need) < target_ratio:
        need += 1
    extra = need - h
    if need > max_factor * h:
        raise NothingToOversample(
            f"reaching ratio {target_ratio} needs {need} heavy copies, over the "
            f"{max_factor}x duplication cap")
    rng = np.random.default_rng(rng_seed)
    picks = heavy[rng.integers(0, h, size=extra)]
    idx = list(range(n)) + [int(i) for i in picks]
    return [dataset[i] for i in idx], idx


def bucket_of(frame_fractions, thresholds=DEFAULT_BUCKETS) -> float:
    """Largest threshold B such that more than half the frames exceed B."""
    f = np.asarray(frame_fractions, dtype=np.float64)
    chosen = thresholds[0]
    for b in sorted(thresholds):
        if np.count_nonzero(f > b) * 2 > f.size:
            chosen = b
    return chosen


def bucket_by_occlusion(sequences_fractions, thresholds=DEFAULT_BUCKETS) -> dict[float, list[int]]:
    """Assign each sequence (given its per-frame occluded fractions) to a bucket."""
    out: dict[float, list[int]] = {b: [] for b in thresholds}
    for i, fr in enumerate(sequences_fractions):
        out[bucket_of(fr, thresholds)].append(i)
    return out
