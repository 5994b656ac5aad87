"""
Dynamic kernel: generation, lesion pooling and gated update
===========================================================

The segmentation kernel is produced from the deepest encoder feature and then
refined at every decoder stage by blending in what the previous prediction
says the lesion looks like.
"""

import torch

from lesionseg.dynamic_kernel import KernelGenerator, KernelUpdate, extract_lesion_feature, predict

torch.manual_seed(0)

deepest = torch.randn(1, 256, 2, 2)
kernel = KernelGenerator(256, kernel_size=1)(deepest)
print("initial kernel:", tuple(kernel.shape))

# A stage with 64-channel features at 8x8 and a coarse 4x4 prediction.
features = torch.randn(1, 64, 8, 8)
coarse = torch.full((1, 1, 4, 4), -6.0)
coarse[..., 1:3, 1:3] = 6.0  # confident lesion in the centre

lesion = extract_lesion_feature(features, coarse, upsample=True, average=True)
centre = features[..., 2:6, 2:6].mean(dim=(-2, -1))
print("lesion descriptor vs mean centre feature, max diff:", (lesion - centre).abs().max().item())

update = KernelUpdate()
gate_f, gate_k = update.gates(lesion[:, None], kernel.flatten(2).transpose(1, 2))
print(f"gates: lesion {gate_f.mean().item():.3f}, previous kernel {gate_k.mean().item():.3f}")

kernel = update(kernel, lesion, stage=4)
logits = predict(kernel, features)
print("new prediction:", tuple(logits.shape))
