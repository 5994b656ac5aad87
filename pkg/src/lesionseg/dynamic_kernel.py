"""Input-conditioned segmentation kernel: generation, lesion pooling, gated update.

The kernel is a per-image ``64 x K x K`` convolution filter. It is generated
from the deepest encoder feature, applied to the unified decoder features of
each stage, and refined between stages by a gated blend with the
prediction-weighted lesion descriptor.
"""

from __future__ import annotations

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import UNIFIED_DIM
from .init import fan_in_uniform_

logger = logging.getLogger(__name__)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a ``B x C x H x W`` tensor."""
    return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


def extract_lesion_feature(features: Tensor, logits: Tensor, upsample: bool = True,
                           average: bool = False) -> Tensor:
    """Sum the features over all pixels, weighted by lesion probability.

    Args:
        features: ``B x C x H x W`` decoder features.
        logits: ``B x 1 x h x w`` prediction logits. With ``upsample=True`` the
            map is at half the feature resolution and is upsampled by two
            (nearest neighbour) first.
        average: divide by the summed weights instead of returning a plain sum.

    Returns:
        ``B x C`` lesion descriptor.
    """
    weights = torch.sigmoid(logits)
    if upsample:
        weights = upsample2(weights)
    if weights.shape[-2:] != features.shape[-2:] or weights.shape[0] != features.shape[0]:
        raise ValueError(
            f"prediction {tuple(logits.shape)} does not match features {tuple(features.shape)} "
            f"(upsample={upsample})")
    lesion = (weights * features).sum(dim=(-2, -1))
    if average:
        lesion = lesion / (weights.sum(dim=(-2, -1)) + 1e-6)
    return lesion


def predict(kernel: Tensor, features: Tensor) -> Tensor:
    """Convolve each image's features with its own kernel.

    ``kernel`` is ``B x C x K x K`` (one single-output filter per image),
    ``features`` is ``B x C x H x W``; returns ``B x 1 x H x W`` logits with
    "same" padding.
    """
    b, c, h, w = features.shape
    if kernel.shape[0] != b or kernel.shape[1] != c:
        raise ValueError(f"kernel {tuple(kernel.shape)} incompatible with features {tuple(features.shape)}")
    if kernel.shape[-1] == 1 and kernel.shape[-2] == 1:
        return torch.einsum("bc,bchw->bhw", kernel.flatten(1), features).unsqueeze(1)
    kh, kw = kernel.shape[-2:]
    # "same" padding; even sizes put the extra row/column at the bottom/right
    padded = F.pad(features.reshape(1, b * c, h, w), ((kw - 1) // 2, kw // 2, (kh - 1) // 2, kh // 2))
    out = F.conv2d(padded, kernel, groups=b)
    return out.reshape(b, 1, h, w)


class KernelGenerator(nn.Module):
    """Adaptive average pooling to ``K x K`` followed by a 1x1 conv to 64 channels."""

    def __init__(self, in_channels: int, kernel_size: int = 1, dim: int = UNIFIED_DIM):
        super().__init__()
        self.kernel_size = kernel_size
        self.proj = nn.Conv2d(in_channels, dim, 1)
        fan_in_uniform_(self.proj)

    def forward(self, deepest: Tensor) -> Tensor:
        h, w = deepest.shape[-2:]
        if self.kernel_size > min(h, w):
            logger.warning("kernel size %d exceeds deepest feature size %dx%d; pooling bins overlap",
                           self.kernel_size, h, w)
        pooled = F.adaptive_avg_pool2d(deepest, self.kernel_size)
        return self.proj(pooled)


class KernelUpdate(nn.Module):
    """Gated kernel update shared by every decoder stage.

    With ``f`` the lesion descriptor and ``k`` the previous kernel (per kernel
    position)::

        g      = phi3(f) * phi4(k)
        gate_k = sigmoid(phi5(g))
        gate_f = sigmoid(phi6(g))
        k_new  = gate_f * phi1(f) + gate_k * phi2(k)
    """

    def __init__(self, dim: int = UNIFIED_DIM):
        super().__init__()
        self.phi = nn.ModuleList(nn.Linear(dim, dim) for _ in range(6))
        for layer in self.phi:
            fan_in_uniform_(layer)

    def gates(self, lesion: Tensor, kernel_vecs: Tensor):
        g = self.phi[2](lesion) * self.phi[3](kernel_vecs)
        return torch.sigmoid(self.phi[5](g)), torch.sigmoid(self.phi[4](g))

    def forward(self, kernel: Tensor, lesion: Tensor, stage: int = 0) -> Tensor:
        b, c, kh, kw = kernel.shape
        if lesion.shape != (b, c):
            raise ValueError(f"lesion descriptor {tuple(lesion.shape)} does not match kernel {tuple(kernel.shape)}")
        # B x K*K x C; the same descriptor updates every kernel position.
        k_vecs = kernel.flatten(2).transpose(1, 2)
        f = lesion.unsqueeze(1)
        gate_f, gate_k = self.gates(f, k_vecs)
        new = gate_f * self.phi[0](f) + gate_k * self.phi[1](k_vecs)
        if not torch.isfinite(new).all():
            raise FloatingPointError(f"non-finite kernel produced by update at stage {stage}")
        return new.transpose(1, 2).reshape(b, c, kh, kw)
