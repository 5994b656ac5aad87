"""Pyramid-pooled self-attention and lesion-token cross-attention blocks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .dynamic_kernel import extract_lesion_feature
from .init import fan_in_uniform_

POOL_SIZES = (1, 3, 5)
NUM_POOLED = sum(s * s for s in POOL_SIZES)  # 35


def pyramid_pool(x: Tensor) -> Tensor:
    """Pool ``B x C x H x W`` into ``B x 35 x C`` tokens.

    Rows are the 1x1 bin, then the 3x3 bins, then the 5x5 bins, each grid in
    row-major order.
    """
    return torch.cat([F.adaptive_avg_pool2d(x, s).flatten(2) for s in POOL_SIZES], dim=2).transpose(1, 2)


def _linear(dim_in: int, dim_out: int) -> nn.Linear:
    return fan_in_uniform_(nn.Linear(dim_in, dim_out))


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__(_linear(dim, expansion * dim), nn.ReLU(), _linear(expansion * dim, dim))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with ``heads`` parallel heads.

    Head ``j`` uses slice ``j`` of the query/key/value projections; head
    outputs are concatenated and passed through ``out_proj``.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} does not divide dim={dim}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = _linear(dim, dim)
        self.k_proj = _linear(dim, dim)
        self.v_proj = _linear(dim, dim)
        self.out_proj = _linear(dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
        qh, kh, vh = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        logits = qh @ kh.transpose(-2, -1) / math.sqrt(self.head_dim)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite attention logits")
        weights = logits.softmax(dim=-1)  # B x heads x N x S
        out = (weights @ vh).transpose(1, 2).flatten(2)
        out = self.out_proj(out)
        return (out, weights) if return_weights else out


class ESABlock(nn.Module):
    """Self-attention whose keys and values are the 35 pyramid-pooled tokens.

    Attention and feed-forward each carry a residual connection; there is no
    normalisation inside the block.
    """

    def __init__(self, dim: int, heads: int = 8, expansion: int = 4):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, expansion)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        pooled = pyramid_pool(x)
        y = tokens + self.attn(tokens, pooled, pooled)
        y = y + self.ffn(y)
        return y.transpose(1, 2).reshape(b, c, h, w)


class LCABlock(nn.Module):
    """Cross-attention from every pixel to a single lesion token.

    The lesion token is the probability-weighted feature sum at the
    prediction's own resolution. In ``"sigmoid"`` mode each pixel and head is
    weighted by ``sigmoid(q . k / sqrt(d))``, so pixels resembling the lesion
    receive more of it. ``"softmax"`` mode is the literal single-key softmax,
    whose weight is always 1.
    """

    def __init__(self, dim: int, heads: int = 8, expansion: int = 4, mode: str = "sigmoid",
                 average: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} does not divide dim={dim}")
        if mode not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown mode {mode!r}")
        self.heads = heads
        self.head_dim = dim // heads
        self.mode = mode
        self.average = average
        self.q_proj = _linear(dim, dim)
        self.k_proj = _linear(dim, dim)
        self.v_proj = _linear(dim, dim)
        self.out_proj = _linear(dim, dim)
        self.ffn = FeedForward(dim, expansion)

    def gate(self, tokens: Tensor, lesion: Tensor) -> Tensor:
        """Per-pixel, per-head weights, ``B x N x heads``."""
        b, n, _ = tokens.shape
        q = self.q_proj(tokens).reshape(b, n, self.heads, self.head_dim)
        k = self.k_proj(lesion).reshape(b, 1, self.heads, self.head_dim)
        if self.mode == "softmax":
            return torch.ones(b, n, self.heads, dtype=tokens.dtype, device=tokens.device)
        scores = (q * k).sum(-1) / math.sqrt(self.head_dim)
        if not torch.isfinite(scores).all():
            raise FloatingPointError("non-finite lesion attention scores")
        return torch.sigmoid(scores)

    def attend(self, tokens: Tensor, lesion: Tensor) -> Tensor:
        b, n, c = tokens.shape
        weights = self.gate(tokens, lesion)
        v = self.v_proj(lesion).reshape(b, 1, self.heads, self.head_dim)
        return self.out_proj((weights.unsqueeze(-1) * v).reshape(b, n, c))

    def forward(self, x: Tensor, logits: Tensor) -> Tensor:
        b, c, h, w = x.shape
        lesion = extract_lesion_feature(x, logits, upsample=False, average=self.average)
        tokens = x.flatten(2).transpose(1, 2)
        y = tokens + self.attend(tokens, lesion)
        y = y + self.ffn(y)
        return y.transpose(1, 2).reshape(b, c, h, w)
