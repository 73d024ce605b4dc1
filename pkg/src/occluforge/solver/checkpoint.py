"""Saving and restoring trained pipelines through the OFCK container."""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from .. import io
from .models import MergedSolver, PositionSolver, RotationSolver, SolverConfig
from .pipeline import MergedPipeline, MocapSolver


def _blocks(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().to(torch.float64).numpy()
            for k, v in module.state_dict().items()}


def _restore(module: torch.nn.Module, prefix: str, blocks) -> None:
    state = {k[len(prefix) + 1:]: torch.as_tensor(v) for k, v in blocks.items()
             if k.startswith(prefix + "/")}
    module.load_state_dict(state)  # load_state_dict casts into the module's dtype


def solver_blocks(solver) -> tuple[dict[str, np.ndarray], dict]:
    if isinstance(solver, MocapSolver):
        blocks = {**_blocks("position", solver.position), **_blocks("rotation", solver.rotation)}
        header = {"kind": "decoupled", "chain": solver.position.chain,
                  "model_config": solver.position.cfg.to_dict()}
    elif isinstance(solver, MergedPipeline):
        blocks = _blocks("merged", solver.model)
        header = {"kind": "merged", "model_config": solver.model.cfg.to_dict()}
    else:
        raise TypeError(f"cannot checkpoint {type(solver).__name__}")
    blocks["tpose"] = np.asarray(solver.tpose, dtype=np.float64)
    header["key_ids"] = [int(i) for i in solver.key_ids]
    header["parents"] = [int(p) for p in solver.parents]
    return blocks, header


def save_solver(path, solver, extra_header: dict | None = None) -> str:
    """Write the checkpoint atomically and return its sha256."""
    blocks, header = solver_blocks(solver)
    data = io.checkpoint_to_bytes(blocks, {**header, **(extra_header or {})})
    io.atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def solver_hash(solver) -> str:
    blocks, header = solver_blocks(solver)
    return hashlib.sha256(io.checkpoint_to_bytes(blocks, header)).hexdigest()


def load_solver(path):
    blocks, header = io.load_checkpoint(path)
    cfg = SolverConfig(**header["model_config"])
    tpose = blocks["tpose"]
    keys = tuple(header["key_ids"])
    parents = tuple(header["parents"])
    if header["kind"] == "decoupled":
        pos = PositionSolver(cfg, chain=header.get("chain", True))
        rot = RotationSolver(cfg)
        _restore(pos, "position", blocks)
        _restore(rot, "rotation", blocks)
        pos.eval()
        rot.eval()
        return MocapSolver(pos, rot, tpose, keys, parents), header
    model = MergedSolver(cfg)
    _restore(model, "merged", blocks)
    model.eval()
    return MergedPipeline(model, tpose, keys, parents), header
