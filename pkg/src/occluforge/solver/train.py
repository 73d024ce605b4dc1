"""Training: position stage on L_P, then rotation stage on aligned position outputs."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..errors import TrainingDiverged
from .losses import LossWeights, position_loss, rotation_loss
from .models import MergedSolver, PositionSolver, RotationSolver, SolverConfig, parameter_count
from .ops import DTYPE
from .pipeline import (MergedPipeline, MocapSolver, align_frames, aligned_targets, apply_rigid,
                       centralize_batch)

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "L_Mocc", "L_Mshift", "L_J", "L_P", "L_rot")


@dataclass(frozen=True)
class TrainConfig:
    position_steps: int = 3000
    rotation_steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    clip: float = 1.0
    cosine: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    deterministic: bool = True
    threads: int = 1
    log_every: int = 50

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossCurve:
    rows: list[dict] = field(default_factory=list)

    def add(self, step: int, **terms) -> None:
        self.rows.append({"step": step, **{k: float(v.detach() if hasattr(v, "detach") else v)
                                           for k, v in terms.items()}})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows if name in r])

    def as_rows(self):
        for r in self.rows:
            yield [r.get(c, "") for c in CURVE_COLUMNS]


def configure_threads(deterministic: bool, threads: int = 1) -> None:
    """Single-threaded deterministic kernels, or ``threads`` intra-op workers."""
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(max(1, threads))
        torch.use_deterministic_algorithms(False)


def _t(x, dtype=DTYPE):
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)


class _Stage:
    """One optimizer over one model with clipping, cosine decay and NaN guard."""

    def __init__(self, name, model, cfg: TrainConfig, steps: int):
        self.name = name
        self.model = model
        self.cfg = cfg
        self.steps = steps
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.step_no = 0

    def lr_at(self, step: int) -> float:
        if not self.cfg.cosine or self.steps <= 1:
            return self.cfg.lr
        return 0.5 * self.cfg.lr * (1.0 + math.cos(math.pi * step / self.steps))

    def step(self, loss, terms):
        if not torch.isfinite(loss):
            snap = {"stage": self.name, "step": self.step_no,
                    **{k: float(v.detach() if hasattr(v, "detach") else v) for k, v in terms.items()},
                    "param_norm": float(sum(p.detach().norm() ** 2 for p in self.model.parameters()) ** 0.5)}
            raise TrainingDiverged(f"{self.name} loss became non-finite at step {self.step_no}", snap)
        for g in self.opt.param_groups:
            g["lr"] = self.lr_at(self.step_no)
        self.opt.zero_grad(set_to_none=False)
        loss.backward()
        if self.cfg.clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.clip)
        self.opt.step()
        self.step_no += 1


def _sampler(n: int, cfg: TrainConfig, salt: int):
    rng = np.random.default_rng([cfg.seed, salt])
    b = min(cfg.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + b > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos:pos + b]
        pos += b


def position_targets(batch):
    """Centralized network inputs and the matching centralized ground truth."""
    c, centroid, ok = centralize_batch(batch.observed, batch.visible)
    gt_m = batch.clean - centroid[:, None]
    gt_j = batch.joints - centroid[:, None]
    return c[ok], batch.visible[ok], gt_m[ok], gt_j[ok]


def train_position(model: PositionSolver, batch, cfg: TrainConfig, curve: LossCurve | None = None):
    curve = curve if curve is not None else LossCurve()
    x, vis, gm, gj = position_targets(batch)
    dt = model.cfg.torch_dtype
    x, vis_t, gm, gj = _t(x, dt), _t(vis, torch.bool), _t(gm, dt), _t(gj, dt)
    occl = ~vis_t
    stage = _Stage("position", model, cfg, cfg.position_steps)
    model.train()
    for step, idx in zip(range(cfg.position_steps), _sampler(len(x), cfg, 1)):
        idx = torch.as_tensor(idx)
        pm, pj, _ = model(x[idx], vis_t[idx])
        loss, terms = position_loss(pm, pj, gm[idx], gj[idx], occl[idx], cfg.weights)
        stage.step(loss, terms)
        if step % cfg.log_every == 0 or step == cfg.position_steps - 1:
            curve.add(step, **terms, L_P=loss.detach())
            log.debug("position step %d L_P %.6g", step, loss.item())
    model.eval()
    return curve


def rotation_inputs(solver: MocapSolver, batch):
    """Aligned position-solver outputs and aligned ground-truth global orientations."""
    pm, pj, _, ok, _ = solver.complete(batch.observed, batch.visible)
    r, t, _ = align_frames(pm, solver.tpose, solver.key_ids)
    am = apply_rigid(r, t, pm)
    aj = apply_rigid(r, t, pj)
    gt = aligned_targets(r, batch.rotations, solver.parents)
    return am[ok], aj[ok], gt[ok]


def train_rotation(solver: MocapSolver, batch, cfg: TrainConfig, curve: LossCurve | None = None):
    curve = curve if curve is not None else LossCurve()
    model = solver.rotation
    am, aj, gt = (_t(a, model.cfg.torch_dtype) for a in rotation_inputs(solver, batch))
    stage = _Stage("rotation", model, cfg, cfg.rotation_steps)
    offset = cfg.position_steps
    model.train()
    for step, idx in zip(range(cfg.rotation_steps), _sampler(len(am), cfg, 2)):
        idx = torch.as_tensor(idx)
        pred = model(am[idx], aj[idx])
        loss, _ = rotation_loss(pred, gt[idx])
        stage.step(loss, {"L_rot": loss.detach()})
        if step % cfg.log_every == 0 or step == cfg.rotation_steps - 1:
            curve.add(offset + step, L_rot=loss.detach())
    model.eval()
    return curve


@dataclass
class TrainResult:
    solver: MocapSolver | MergedPipeline
    curve: LossCurve


def train(batch, tpose, key_ids, model_cfg: SolverConfig, cfg: TrainConfig = TrainConfig(),
          chain: bool = True) -> TrainResult:
    """Both stages in order. ``chain=False`` trains the no-chain ablation."""
    configure_threads(cfg.deterministic, cfg.threads)
    torch.manual_seed(cfg.seed)
    solver = MocapSolver(PositionSolver(model_cfg, chain=chain), RotationSolver(model_cfg),
                         np.asarray(tpose, dtype=np.float64), tuple(key_ids),
                         tuple(int(p) for p in batch.parents))
    log.info("position solver: %d parameters, rotation solver: %d parameters",
             parameter_count(solver.position), parameter_count(solver.rotation))
    curve = train_position(solver.position, batch, cfg)
    train_rotation(solver, batch, cfg, curve)
    return TrainResult(solver, curve)


def merged_inputs(batch, tpose, key_ids):
    """Preprocessing of the no-decouple ablation: align raw visible key markers.

    Frames with fewer than three visible key markers cannot be aligned and
    are dropped (``ok`` is False for them).
    """
    r, t, ok = align_frames(batch.observed, tpose, key_ids, batch.visible)
    x = np.where(batch.visible[..., None], apply_rigid(r, t, batch.observed), 0.0)
    gm = apply_rigid(r, t, batch.clean)
    gj = apply_rigid(r, t, batch.joints)
    gr = aligned_targets(r, batch.rotations, batch.parents)
    return x, gm, gj, gr, ok


def train_merged(batch, tpose, key_ids, model_cfg: SolverConfig,
                 cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Single network on L_P + L_rot; one stage with both step budgets."""
    configure_threads(cfg.deterministic, cfg.threads)
    torch.manual_seed(cfg.seed)
    model = MergedSolver(model_cfg)
    x, gm, gj, gr, ok = merged_inputs(batch, tpose, key_ids)
    log.info("merged solver: %d parameters, %d/%d frames alignable",
             parameter_count(model), int(ok.sum()), len(ok))
    dt = model_cfg.torch_dtype
    x, vis = _t(x[ok], dt), _t(batch.visible[ok], torch.bool)
    gm, gj, gr = _t(gm[ok], dt), _t(gj[ok], dt), _t(gr[ok], dt)
    steps = cfg.position_steps + cfg.rotation_steps
    stage = _Stage("merged", model, cfg, steps)
    curve = LossCurve()
    model.train()
    for step, idx in zip(range(steps), _sampler(len(x), cfg, 3)):
        idx = torch.as_tensor(idx)
        pm, pj, pr, _ = model(x[idx], vis[idx])
        lp, terms = position_loss(pm, pj, gm[idx], gj[idx], ~vis[idx], cfg.weights)
        lr_, _ = rotation_loss(pr, gr[idx])
        stage.step(lp + lr_, {**terms, "L_rot": lr_.detach()})
        if step % cfg.log_every == 0 or step == steps - 1:
            curve.add(step, **terms, L_P=lp.detach(), L_rot=lr_.detach())
    model.eval()
    pipeline = MergedPipeline(model, np.asarray(tpose, dtype=np.float64), tuple(key_ids),
                              tuple(int(p) for p in batch.parents))
    return TrainResult(pipeline, curve)
