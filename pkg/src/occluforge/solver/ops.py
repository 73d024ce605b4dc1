"""Differentiable primitives for the solver networks.

Reverse-mode differentiation comes from torch autograd; the layers themselves
are written out here so each one can be finite-difference checked in
isolation. Everything defaults to float64.
"""

from __future__ import annotations

import math

import torch
from torch import nn

DTYPE = torch.float64


def _init(shape, fan_in: int, gen: torch.Generator | None) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    w = torch.empty(shape, dtype=DTYPE)
    w.uniform_(-bound, bound, generator=gen)
    return nn.Parameter(w)


class Affine(nn.Module):
    """y = x W + b over the last axis."""

    def __init__(self, d_in: int, d_out: int, gen: torch.Generator | None = None, bias: bool = True):
        super().__init__()
        self.weight = _init((d_in, d_out), d_in, gen)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MarkerConv(nn.Module):
    """1-D convolution along the token (marker) axis with zero padding, same length out."""

    def __init__(self, d_in: int, d_out: int, kernel: int = 3, gen: torch.Generator | None = None):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.kernel = kernel
        self.weight = _init((kernel, d_in, d_out), kernel * d_in, gen)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def forward(self, x):  # (B, M, d)
        half = self.kernel // 2
        m = x.shape[-2]
        padded = torch.nn.functional.pad(x, (0, 0, half, half))
        out = self.bias
        for k in range(self.kernel):
            out = out + padded[..., k:k + m, :] @ self.weight[k]
        return out


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.shift = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x):
        mu = x.mean(dim=-1, keepdim=True)
        xc = x - mu
        var = (xc * xc).mean(dim=-1, keepdim=True)
        return xc / torch.sqrt(var + self.eps) * self.gain + self.shift


def gelu(x):
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax(scores, dim: int = -1):
    z = scores - scores.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def mean_square(x):
    return (x * x).mean()


class Attention(nn.Module):
    """Multi-head softmax self-attention.

    ``forward`` returns the mixed tokens and the head-averaged attention
    matrix (B, V, V). ``mask`` is a boolean (B, V, V) or (V, V) array where
    False forbids query row -> key column. Rows must keep at least one key.
    """

    def __init__(self, d: int, heads: int, gen: torch.Generator | None = None):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Affine(d, d, gen)
        self.k = Affine(d, d, gen, bias=False)  # a key bias shifts every score in a row equally
        self.v = Affine(d, d, gen)
        self.out = Affine(d, d, gen)

    def weights(self, x, mask=None):
        b, n, d = x.shape
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(x).view(b, n, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if mask is not None:
            m = mask if mask.dim() == 2 else mask[:, None]
            scores = scores.masked_fill(~m, float("-inf"))
        return softmax(scores)  # (B, H, V, V)

    def forward(self, x, mask=None):
        b, n, d = x.shape
        p = self.weights(x, mask)
        v = self.v(x).view(b, n, self.heads, d // self.heads).transpose(1, 2)
        mixed = (p @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(mixed), p.mean(dim=1)


class FeedForward(nn.Module):
    def __init__(self, d: int, ratio: int = 2, gen: torch.Generator | None = None):
        super().__init__()
        self.a = Affine(d, ratio * d, gen)
        self.b = Affine(ratio * d, d, gen)

    def forward(self, x):
        return self.b(gelu(self.a(x)))


class ConvBlock(nn.Module):
    def __init__(self, d: int, kernel: int = 3, gen: torch.Generator | None = None):
        super().__init__()
        self.norm = LayerNorm(d)
        self.conv = MarkerConv(d, d, kernel, gen)

    def forward(self, x):
        return x + gelu(self.conv(self.norm(x)))


class AttentionBlock(nn.Module):
    """Pre-norm residual attention + feed-forward.

    In ``linear`` mode the block is pure mixing, h <- P h, with P the
    head-averaged attention matrix; used to check the propagation identity.
    """

    def __init__(self, d: int, heads: int, ratio: int = 2, gen: torch.Generator | None = None,
                 linear: bool = False):
        super().__init__()
        self.linear = linear
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, gen)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, ratio, gen)

    def forward(self, x, mask=None):
        if self.linear:
            p = self.attn.weights(x, mask).mean(dim=1)
            return p @ x, p
        a, p = self.attn(self.norm1(x), mask)
        x = x + a
        return x + self.ff(self.norm2(x)), p
