"""Attention propagation through the decoder's joined marker/joint tokens.

Each decoder layer t mixes tokens with a row-stochastic matrix P(t) (heads
averaged). Stacking layers composes them: after L layers a token's state is
drawn from the initial states through P(L-1) ... P(0). Entry [c, a] of the
product P(s) P(s-1) sums every two-step route c <- b <- a, which is how a
joint token can relay information between distant markers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import PreconditionError
from ..io import write_csv


@dataclass
class ChainPropagation:
    matrices: list[np.ndarray]  # per decoder layer, (V, V)
    n_markers: int
    n_joints: int
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrices = [np.asarray(p, dtype=np.float64) for p in self.matrices]
        v = self.n_markers + self.n_joints
        for p in self.matrices:
            if p.shape != (v, v):
                raise PreconditionError(f"propagation matrix shape {p.shape}, expected {(v, v)}")
        if not self.names:
            self.names = [f"marker{i}" for i in range(self.n_markers)] + \
                         [f"joint{j}" for j in range(self.n_joints)]

    @property
    def n_layers(self) -> int:
        return len(self.matrices)

    @property
    def size(self) -> int:
        return self.n_markers + self.n_joints

    def kind(self, token: int) -> str:
        return "marker" if token < self.n_markers else "joint"

    def max_row_error(self) -> float:
        return max(float(np.abs(p.sum(axis=1) - 1.0).max()) for p in self.matrices)

    @classmethod
    def from_attention(cls, attn, frame: int = 0, n_markers: int = 0, n_joints: int = 0,
                       names=None) -> ChainPropagation:
        """Pick one frame out of batched per-layer (B, V, V) attention tensors."""
        mats = [np.asarray(a.detach().numpy() if hasattr(a, "detach") else a)[frame] for a in attn]
        return cls(mats, n_markers, n_joints, list(names or []))


def compose_propagation(chain: ChainPropagation, from_step: int = 0, to_step: int | None = None):
    """P(to) P(to - 1) ... P(from), as a plain matrix product."""
    if to_step is None:
        to_step = chain.n_layers - 1
    if not 0 <= from_step <= to_step < chain.n_layers:
        raise PreconditionError(f"steps {from_step}..{to_step} outside 0..{chain.n_layers - 1}")
    out = chain.matrices[from_step]
    for t in range(from_step + 1, to_step + 1):
        out = chain.matrices[t] @ out
    return out


def chain_report(chain: ChainPropagation, token: int, layer: int | None = None) -> list[tuple]:
    """Sources feeding ``token``, heaviest first: (rank, name, kind, index, weight).

    ``layer=None`` uses the product over all layers; an integer reads that
    single layer's matrix.
    """
    if not 0 <= token < chain.size:
        raise PreconditionError(f"token {token} outside 0..{chain.size - 1}")
    mat = compose_propagation(chain) if layer is None else compose_propagation(chain, layer, layer)
    row = mat[token]
    order = np.argsort(-row, kind="stable")
    return [(rank, chain.names[i], chain.kind(i), int(i), float(row[i]))
            for rank, i in enumerate(order)]


def save_chain_report(path, rows) -> None:
    write_csv(path, ["rank", "source", "kind", "index", "weight"], rows)
