"""Training losses for the two solver stages."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ..errors import PreconditionError
from .models import matrix_to_6d_torch


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # occluded markers
    lambda2: float = 1.0  # visible / shifted markers
    lambda3: float = 2.0  # joints

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise PreconditionError("loss weights must be non-negative")


def _distance(a, b):
    # double where: exact 0 and a zero (not NaN) gradient when a == b; NaN still propagates
    d2 = ((a - b) ** 2).sum(dim=-1)
    zero = d2 == 0
    return torch.where(zero, torch.zeros_like(d2), torch.sqrt(torch.where(zero, torch.ones_like(d2), d2)))


def _masked_mean(values, mask):
    n = mask.sum()
    if int(n) == 0:
        return torch.zeros((), dtype=values.dtype)
    return torch.where(mask, values, torch.zeros((), dtype=values.dtype)).sum() / n


def position_loss(pred_markers, pred_joints, gt_markers, gt_joints, occluded,
                  weights: LossWeights = LossWeights()):
    """Weighted sum of mean Euclidean errors; returns (total, breakdown dict).

    Means pool over every frame in the batch. An empty marker group
    contributes 0.
    """
    if pred_markers.shape != gt_markers.shape or pred_joints.shape != gt_joints.shape:
        raise PreconditionError("prediction and ground-truth shapes differ")
    occluded = torch.as_tensor(occluded, dtype=torch.bool)
    dm = _distance(pred_markers, gt_markers)
    l_occ = _masked_mean(dm, occluded)
    l_shift = _masked_mean(dm, ~occluded)
    l_j = _distance(pred_joints, gt_joints).mean()
    total = weights.lambda1 * l_occ + weights.lambda2 * l_shift + weights.lambda3 * l_j
    return total, {"L_Mocc": l_occ, "L_Mshift": l_shift, "L_J": l_j}


def rotation_loss(pred_rotations, gt_rotations):
    """Mean over joints (and frames) of the squared 6D-encoding error.

    Returns (loss, per-joint tensor). Every joint has the same weight.
    """
    if pred_rotations.shape != gt_rotations.shape:
        raise PreconditionError("prediction and ground-truth rotation counts differ")
    gt = torch.as_tensor(gt_rotations, dtype=pred_rotations.dtype)
    err = ((matrix_to_6d_torch(pred_rotations) - matrix_to_6d_torch(gt)) ** 2).sum(dim=-1)
    per_joint = err.reshape(-1, err.shape[-1]).mean(dim=0)
    return per_joint.mean(), per_joint
