"""Position Solver, Rotation Solver and the merged single-network ablation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..errors import DegenerateRotation6D
from .ops import DTYPE, Affine, AttentionBlock, ConvBlock, LayerNorm

IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class SolverConfig:
    n_markers: int
    n_joints: int
    width: int = 64
    conv_blocks: int = 2
    kernel: int = 3
    encoder_blocks: int = 2
    decoder_blocks: int = 3
    rotation_blocks: int = 4
    heads: int = 4
    ff_ratio: int = 2
    linear: bool = False  # pure-mixing decoder, for the propagation identity
    seed: int = 0
    dtype: str = "float64"

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


def six_d_to_matrix_torch(v, eps: float = 1e-12):
    """Gram-Schmidt decode (..., J, 6) -> (..., J, 3, 3); same convention as the numpy version."""
    a1, a2 = v[..., :3], v[..., 3:]
    n1 = torch.linalg.vector_norm(a1, dim=-1, keepdim=True)
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(dim=-1, keepdim=True) * b1
    nu = torch.linalg.vector_norm(u2, dim=-1, keepdim=True)
    n2 = torch.linalg.vector_norm(a2, dim=-1, keepdim=True)
    bad = (n1 <= eps) | (n2 <= eps) | (nu <= eps * n2)
    if bool(bad.any()):
        joint = int(torch.nonzero(bad.reshape(-1, v.shape[-2]))[0, 1])
        raise DegenerateRotation6D("6D output is degenerate", joint=joint)
    b2 = u2 / nu
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_6d_torch(m):
    return torch.cat([m[..., :, 0], m[..., :, 1]], dim=-1)


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


# Position heads emit decimetres. With unit-scale features after the final
# norm, a metre-scale head would start ~1 m off and each Adam step would move
# outputs by centimetres.
HEAD_SCALE = 0.1


def _param(shape, gen, scale=0.02):
    return nn.Parameter(torch.randn(shape, dtype=DTYPE, generator=gen) * scale)


class PositionSolver(nn.Module):
    """Marker completion and joint regression from one centralized frame.

    ``chain=False`` builds the ablation whose decoder cannot route
    information between markers and joints.
    """

    def __init__(self, cfg: SolverConfig, chain: bool = True, decoder_blocks: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.chain = chain
        d = cfg.width
        g = _generator(cfg.seed)
        self.embed = Affine(3, d, g)
        self.occluded_token = _param(d, g)
        self.marker_pe = _param((cfg.n_markers, d), g)
        self.joint_queries = _param((cfg.n_joints, d), g)
        self.conv = nn.ModuleList(ConvBlock(d, cfg.kernel, g) for _ in range(cfg.conv_blocks))
        self.encoder = nn.ModuleList(AttentionBlock(d, cfg.heads, cfg.ff_ratio, g)
                                     for _ in range(cfg.encoder_blocks))
        n_dec = cfg.decoder_blocks if decoder_blocks is None else decoder_blocks
        self.decoder = nn.ModuleList(AttentionBlock(d, cfg.heads, cfg.ff_ratio, g, linear=cfg.linear)
                                     for _ in range(n_dec))
        self.norm = LayerNorm(d)
        self.marker_head = Affine(d, 3, g)
        self.joint_head = Affine(d, 3, g)
        if type(self) is PositionSolver:
            self.to(cfg.torch_dtype)

    def decoder_mask(self, visible):
        """None for the full model. Without the chain, marker tokens see only
        markers and joint tokens see only visible markers."""
        if self.chain:
            return None
        b, m = visible.shape
        j = self.cfg.n_joints
        mask = torch.zeros((b, m + j, m + j), dtype=torch.bool)
        mask[:, :m, :m] = True
        mask[:, m:, :m] = visible[:, None, :]
        return mask

    def tokens(self, positions, visible):
        """Initial marker tokens: embedded position, or the shared occluded token."""
        x = torch.where(visible[..., None], positions, positions.new_zeros(()))
        tok = torch.where(visible[..., None], self.embed(x), self.occluded_token)
        tok = tok + self.marker_pe
        for blk in self.conv:
            tok = blk(tok)
        for blk in self.encoder:
            tok, _ = blk(tok)
        return tok

    def decode(self, h, mask=None):
        attn = []
        for blk in self.decoder:
            h, p = blk(h, mask)
            attn.append(p)
        return h, attn

    def forward(self, positions, visible):
        """(B, M, 3), (B, M) -> markers (B, M, 3), joints (B, J, 3), decoder attention list."""
        b, m = visible.shape
        tok = self.tokens(positions, visible)
        h0 = torch.cat([tok, self.joint_queries.expand(b, -1, -1)], dim=1)
        h, attn = self.decode(h0, self.decoder_mask(visible))
        h = self.norm(h)
        skip = torch.where(visible[..., None], positions, positions.new_zeros(()))
        markers = HEAD_SCALE * self.marker_head(h[:, :m]) + skip
        joints = HEAD_SCALE * self.joint_head(h[:, m:])
        return markers, joints, attn


class RotationSolver(nn.Module):
    """Per-joint global orientations in the T-pose-aligned frame.

    Each joint's orientation is read from the markers on its own segment, so
    the target stays independent per joint; the pipeline converts to local
    rotations afterwards.
    """

    def __init__(self, cfg: SolverConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        g = _generator(cfg.seed + 1)
        self.embed_marker = Affine(3, d, g)
        self.embed_joint = Affine(3, d, g)
        self.marker_pe = _param((cfg.n_markers, d), g)
        self.joint_pe = _param((cfg.n_joints, d), g)
        self.blocks = nn.ModuleList(AttentionBlock(d, cfg.heads, cfg.ff_ratio, g)
                                    for _ in range(cfg.rotation_blocks))
        self.norm = LayerNorm(d)
        self.head = Affine(d, 6, g)
        self.register_buffer("offset", torch.tensor(IDENTITY_6D, dtype=DTYPE))
        self.to(cfg.torch_dtype)

    def forward_6d(self, markers, joints):
        m = markers.shape[1]
        h = torch.cat([self.embed_marker(markers) + self.marker_pe,
                       self.embed_joint(joints) + self.joint_pe], dim=1)
        for blk in self.blocks:
            h, _ = blk(h)
        return self.head(self.norm(h[:, m:])) + self.offset

    def forward(self, markers, joints):
        """(B, M, 3), (B, J, 3) -> rotations (B, J, 3, 3)."""
        return six_d_to_matrix_torch(self.forward_6d(markers, joints))


class MergedSolver(PositionSolver):
    """Single network regressing markers, joints and rotations together.

    Used by the no-decouple ablation; its input is the raw frame aligned to
    the T-pose during preprocessing.
    """

    def __init__(self, cfg: SolverConfig):
        super().__init__(cfg, chain=True, decoder_blocks=cfg.decoder_blocks + cfg.rotation_blocks)
        g = _generator(cfg.seed + 2)
        self.rotation_head = Affine(cfg.width, 6, g)
        self.register_buffer("offset", torch.tensor(IDENTITY_6D, dtype=DTYPE))
        self.to(cfg.torch_dtype)

    def forward(self, positions, visible):
        b, m = visible.shape
        tok = self.tokens(positions, visible)
        h0 = torch.cat([tok, self.joint_queries.expand(b, -1, -1)], dim=1)
        h, attn = self.decode(h0)
        h = self.norm(h)
        skip = torch.where(visible[..., None], positions, positions.new_zeros(()))
        markers = HEAD_SCALE * self.marker_head(h[:, :m]) + skip
        joints = HEAD_SCALE * self.joint_head(h[:, m:])
        rot6 = self.rotation_head(h[:, m:]) + self.offset
        return markers, joints, six_d_to_matrix_torch(rot6), attn


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
