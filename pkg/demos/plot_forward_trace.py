"""
Forward pass and ablation variants
==================================

Build the segmentation network, run one image through it and look at the
per-stage predictions. Then compare parameter counts of the four ablation
settings.
"""

import torch

from lesionseg import ModelConfig, build_model
from lesionseg.seg_core import count_parameters

config = ModelConfig()  # 64x64 input, 1x1 dynamic kernel, 8 heads
model = build_model(config).eval()

image = torch.rand(1, 3, *config.input_size)
with torch.no_grad():
    trace = model(image)

# Predictions run from the coarsest stage (5) to the finest (1).
for stage in (5, 4, 3, 2, 1):
    print(f"P{stage}: {tuple(trace.predictions[stage].shape)}  kernel {tuple(trace.kernels[stage].shape)}")

# P1 is the model output, at half the input resolution.
print("final:", tuple(trace.final.shape))

###############################################################################
# Each switch adds parameters on top of the previous configuration.

for name, flags in [("Baseline", (False, False, False)), ("Baseline+DK", (True, False, False)),
                    ("Baseline+DK+ESAs", (True, True, False)), ("Ours", (True, True, True))]:
    print(f"{name:<18} {count_parameters(build_model(config.with_flags(*flags))):>10,d} parameters")
