"""Analytic gradients against central finite differences."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ..errors import PreconditionError
from . import ops
from .losses import position_loss, rotation_loss
from .models import PositionSolver, RotationSolver, SolverConfig

FD_STEP = 1e-6
# Central differences at step 1e-6 carry ~1e-10 absolute rounding noise for O(1)
# losses, so gradients smaller than this are compared in absolute terms.
RELATIVE_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = RELATIVE_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckReport:
    tolerance: float
    block_errors: dict[str, float] = field(default_factory=dict)
    samples: list[tuple[str, int, float, float]] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def rows(self):
        for name, err in sorted(self.block_errors.items()):
            yield [name, err]


def gradient_check(loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor],
                   n_samples: int = 100, tolerance: float = 1e-4, step: float = FD_STEP,
                   seed: int = 0, floor: float = RELATIVE_FLOOR,
                   projection: torch.Tensor | None = None) -> GradCheckReport:
    """Compare autograd against central differences on ``n_samples`` random scalar entries.

    Blocks are drawn uniformly, then one entry uniformly inside the block, so
    small blocks (biases, norms) get checked as often as large weights.

    With ``projection`` given, ``loss_fn`` returns an output tensor and the
    checked scalar is ``(output * projection).sum()``. The difference quotient
    is then taken on the outputs before projecting, so entries the
    perturbation does not touch cancel exactly instead of adding rounding noise.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise PreconditionError(f"gradient check needs float64, block {name} is {p.dtype}")
    names = list(params)
    for p in params.values():
        p.grad = None
    def scalar(y):
        return y if projection is None else (y * projection).sum()

    loss = scalar(loss_fn())
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    grads = {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    with torch.no_grad():
        for _ in range(n_samples):
            name = names[int(rng.integers(len(names)))]
            flat = params[name].view(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            if projection is None:
                numeric = (up.item() - down.item()) / (2.0 * step)
            else:
                numeric = (((up - down) / (2.0 * step)) * projection).sum().item()
            analytic = grads[name].reshape(-1)[i].item()
            err = relative_error(analytic, numeric, floor)
            report.samples.append((name, i, analytic, numeric))
            report.block_errors[name] = max(report.block_errors.get(name, 0.0), err)
    return report


def check_module(module: nn.Module, inputs: tuple, n_samples: int = 100, tolerance: float = 1e-4,
                 seed: int = 0, include_inputs: bool = True) -> GradCheckReport:
    """Finite-difference check of ``module(*inputs)`` through a fixed random projection."""
    gen = torch.Generator().manual_seed(seed)
    leaves = []
    for x in inputs:
        if torch.is_tensor(x) and x.is_floating_point():
            leaves.append(x.detach().clone().requires_grad_(include_inputs))
        else:
            leaves.append(x)
    out = module(*leaves)
    out = out[0] if isinstance(out, tuple) else out
    proj = torch.randn(out.shape, dtype=torch.float64, generator=gen)

    def output():
        y = module(*leaves)
        return y[0] if isinstance(y, tuple) else y

    params = {n: p for n, p in module.named_parameters()}
    if include_inputs:
        params.update({f"input{k}": x for k, x in enumerate(leaves)
                       if torch.is_tensor(x) and x.requires_grad})
    return gradient_check(output, params, n_samples, tolerance, seed=seed, projection=proj)


class _Fn(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, *xs):
        return self.fn(*xs)


def primitive_reports(seed: int = 0, n_samples: int = 100, tolerance: float = 1e-4,
                      width: int = 16) -> dict[str, GradCheckReport]:
    """Check every primitive in isolation at small width."""
    gen = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(shape, dtype=torch.float64, generator=gen)

    x = rand(3, 7, width)
    mods = {
        "affine": (ops.Affine(width, width, gen), (x,)),
        "marker_conv": (ops.MarkerConv(width, width, 3, gen), (x,)),
        "layer_norm": (ops.LayerNorm(width), (x,)),
        "gelu": (_Fn(ops.gelu), (x,)),
        "softmax": (_Fn(lambda s: ops.softmax(s)), (rand(3, 7, 7),)),
        "mean_square": (_Fn(ops.mean_square), (x,)),
        "attention": (ops.Attention(width, 4, gen), (x,)),
        "attention_block": (ops.AttentionBlock(width, 4, 2, gen), (x,)),
        "conv_block": (ops.ConvBlock(width, 3, gen), (x,)),
    }
    # Perturb layer-norm affine terms off their (1, 0) init so their gradients are generic.
    with torch.no_grad():
        for mod, _ in mods.values():
            for name, p in mod.named_parameters():
                if "gain" in name or "shift" in name or "bias" in name:
                    p.add_(0.1 * rand(*p.shape))
    return {k: check_module(m, inp, n_samples, tolerance, seed) for k, (m, inp) in mods.items()}


def _toy_batch(cfg: SolverConfig, seed: int, n: int = 4):
    rng = np.random.default_rng(seed)
    pos = rng.normal(scale=0.3, size=(n, cfg.n_markers, 3))
    vis = rng.random((n, cfg.n_markers)) > 0.3
    vis[:, 0] = True
    pos[~vis] = 0.0
    gm = pos + rng.normal(scale=0.02, size=pos.shape)
    gj = rng.normal(scale=0.3, size=(n, cfg.n_joints, 3))
    q = rng.normal(size=(n * cfg.n_joints, 4))
    from scipy.spatial.transform import Rotation as R

    gr = R.from_quat(q).as_matrix().reshape(n, cfg.n_joints, 3, 3)
    return (torch.tensor(pos), torch.tensor(vis), torch.tensor(gm), torch.tensor(gj), torch.tensor(gr))


def position_loss_report(cfg: SolverConfig | None = None, seed: int = 0, n_samples: int = 100,
                         tolerance: float = 1e-4, chain: bool = True) -> GradCheckReport:
    """End-to-end L_P through the whole Position Solver."""
    cfg = cfg or SolverConfig(12, 5, width=16, seed=seed)
    model = PositionSolver(cfg, chain=chain)
    pos, vis, gm, gj, _ = _toy_batch(cfg, seed)

    def loss():
        pm, pj, _ = model(pos, vis)
        return position_loss(pm, pj, gm, gj, ~vis)[0]

    return gradient_check(loss, dict(model.named_parameters()), n_samples, tolerance, seed=seed)


def rotation_loss_report(cfg: SolverConfig | None = None, seed: int = 0, n_samples: int = 100,
                         tolerance: float = 1e-4) -> GradCheckReport:
    """End-to-end rotation loss through the whole Rotation Solver."""
    cfg = cfg or SolverConfig(12, 5, width=16, seed=seed)
    model = RotationSolver(cfg)
    pos, _, _, gj, gr = _toy_batch(cfg, seed)

    def loss():
        return rotation_loss(model(pos, gj), gr)[0]

    return gradient_check(loss, dict(model.named_parameters()), n_samples, tolerance, seed=seed)
