"""
Pyramid-pooled self-attention and lesion-guided cross-attention
===============================================================

Self-attention over every pixel is replaced by attention to 35 pooled
summaries (1x1, 3x3 and 5x5 grids). Cross-attention uses one lesion token and
a per-pixel sigmoid gate, so pixels similar to the lesion are enhanced more.
"""

import torch

from lesionseg.attention import ESABlock, LCABlock, pyramid_pool

torch.manual_seed(0)

x = torch.randn(1, 64, 16, 16)
print("pooled keys:", tuple(pyramid_pool(x).shape))  # 256 queries look at 35 keys, not 256

esa = ESABlock(64, heads=8)
print("ESA output:", tuple(esa(x).shape))

###############################################################################
# The cross-attention gate for each pixel and head.

lca = LCABlock(64, heads=8)
logits = torch.full((1, 1, 16, 16), -8.0)
logits[..., 4:10, 4:10] = 8.0
tokens = x.flatten(2).transpose(1, 2)
lesion = (torch.sigmoid(logits) * x).sum((-2, -1)) / torch.sigmoid(logits).sum()
gate = lca.gate(tokens, lesion)
print("gate shape (batch, pixels, heads):", tuple(gate.shape))
print(f"gate range: {gate.min().item():.3f} .. {gate.max().item():.3f}")
print("LCA output:", tuple(lca(x, logits).shape))
