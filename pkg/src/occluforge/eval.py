"""JPE / JOE metrics and severity-bucketed evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import geodesic_angles_deg
from .io import write_csv
from .occlusion import DEFAULT_BUCKETS, bucket_by_occlusion, frame_occlusion_fraction
from .solver.pipeline import SolveResult


def joint_errors_cm(pred, gt) -> np.ndarray:
    """Euclidean error per joint in centimetres, shape (..., J)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return 100.0 * np.linalg.norm(pred - gt, axis=-1)


def jpe(pred, gt) -> float:
    """Mean joint position error in cm, averaged over joints then frames."""
    e = joint_errors_cm(pred, gt)
    return float(e.reshape(-1, e.shape[-1]).mean(axis=1).mean())


def joint_angles_deg(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return geodesic_angles_deg(pred, gt)


def joe(pred, gt) -> float:
    """Mean geodesic joint orientation error in degrees."""
    e = joint_angles_deg(pred, gt)
    return float(e.reshape(-1, e.shape[-1]).mean(axis=1).mean())


@dataclass
class BucketMetrics:
    frames: int
    solved: int
    failures: int
    jpe_cm: float
    joe_deg: float


@dataclass
class EvalReport:
    buckets: dict[str, BucketMetrics]
    overall: BucketMetrics
    per_joint_jpe_cm: np.ndarray
    per_joint_joe_deg: np.ndarray
    fingerprint: dict = field(default_factory=dict)

    def self_check(self, tol: float = 1e-9) -> list[str]:
        """Invariant violations; empty when the report is consistent."""
        problems = []
        if sum(b.frames for b in self.buckets.values()) != self.overall.frames:
            problems.append("bucket frame counts do not sum to the dataset frame count")
        for name, b in [*self.buckets.items(), ("overall", self.overall)]:
            if b.solved + b.failures != b.frames:
                problems.append(f"{name}: solved + failures != frames")
            if b.solved and not (b.jpe_cm >= 0 and b.joe_deg >= 0):
                problems.append(f"{name}: negative or NaN metric")
        solved = sum(b.solved for b in self.buckets.values())
        if solved:
            for attr in ("jpe_cm", "joe_deg"):
                merged = sum(getattr(b, attr) * b.solved for b in self.buckets.values() if b.solved) / solved
                if abs(merged - getattr(self.overall, attr)) > tol * max(1.0, abs(merged)):
                    problems.append(f"frame-weighted bucket {attr} {merged} != overall")
        return problems

    def rows(self):
        for name, b in [*self.buckets.items(), ("overall", self.overall)]:
            yield [name, b.frames, b.solved, b.failures, b.jpe_cm, b.joe_deg]

    def save_csv(self, path) -> None:
        write_csv(path, ["bucket", "frames", "solved", "failures", "JPE_cm", "JOE_deg"], self.rows())

    def save_joint_csv(self, path, names=None) -> None:
        names = names or [f"joint{j}" for j in range(len(self.per_joint_jpe_cm))]
        write_csv(path, ["joint", "JPE_cm", "JOE_deg"],
                  ([n, float(a), float(b)] for n, a, b in
                   zip(names, self.per_joint_jpe_cm, self.per_joint_joe_deg)))

    def table(self) -> str:
        head = f"{'bucket':>8} {'frames':>7} {'solved':>7} {'fail':>6} {'JPE cm':>9} {'JOE deg':>9}"
        lines = [head, "-" * len(head)]
        for name, frames, solved, fail, a, b in self.rows():
            lines.append(f"{name:>8} {frames:>7d} {solved:>7d} {fail:>6d} {a:>9.4f} {b:>9.3f}")
        return "\n".join(lines)


def _metrics(jpe_frame, joe_frame, failed, idx) -> BucketMetrics:
    sel = np.asarray(idx, dtype=np.int64)
    ok = sel[~failed[sel]]
    a = float(jpe_frame[ok].mean()) if ok.size else float("nan")
    b = float(joe_frame[ok].mean()) if ok.size else float("nan")
    return BucketMetrics(int(sel.size), int(ok.size), int(sel.size - ok.size), a, b)


def bucket_label(threshold: float) -> str:
    return f"{round(100 * threshold)}%"


def evaluate_result(result: SolveResult, batch, buckets=DEFAULT_BUCKETS,
                    fingerprint: dict | None = None) -> EvalReport:
    """Score a solve against ground truth; buckets are assigned per source sequence."""
    failed = np.asarray(result.failed, dtype=bool)
    ok = ~failed
    n = len(failed)
    jpe_frame = np.full(n, np.nan)
    joe_frame = np.full(n, np.nan)
    pj_err = joint_errors_cm(np.where(ok[:, None, None], result.joints, 0.0), batch.joints)
    pr = np.where(ok[:, None, None, None], result.rotations, np.eye(3))
    po_err = joint_angles_deg(pr, batch.rotations)
    jpe_frame[ok] = pj_err[ok].mean(axis=1)
    joe_frame[ok] = po_err[ok].mean(axis=1)

    seq_ids = np.unique(batch.sequence)
    fractions = frame_occlusion_fraction(batch.visible)
    groups = bucket_by_occlusion([fractions[batch.sequence == s] for s in seq_ids], buckets)
    report_buckets = {}
    for thr in sorted(groups):
        members = np.isin(batch.sequence, seq_ids[groups[thr]])
        report_buckets[bucket_label(thr)] = _metrics(jpe_frame, joe_frame, failed,
                                                     np.flatnonzero(members))
    overall = _metrics(jpe_frame, joe_frame, failed, np.arange(n))
    per_joint_p = pj_err[ok].mean(axis=0) if ok.any() else np.full(pj_err.shape[1], np.nan)
    per_joint_o = po_err[ok].mean(axis=0) if ok.any() else np.full(po_err.shape[1], np.nan)
    return EvalReport(report_buckets, overall, per_joint_p, per_joint_o, dict(fingerprint or {}))


def evaluate(solver, batch, buckets=DEFAULT_BUCKETS, fingerprint: dict | None = None) -> EvalReport:
    """Run ``solver.solve`` on every frame of ``batch`` and score it."""
    return evaluate_result(solver.solve(batch.observed, batch.visible), batch, buckets, fingerprint)


@dataclass
class OracleSolver:
    """Returns ground truth; a harness check that a perfect solver scores zero."""

    batch: object

    def solve(self, observed, visible, **_) -> SolveResult:
        b = self.batch
        return SolveResult(b.clean.copy(), b.joints.copy(), b.rotations.copy(),
                           np.zeros(len(b), dtype=bool))
