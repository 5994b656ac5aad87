import math

import torch.nn as nn


def fan_in_uniform_(layer: nn.Module, gain: float = 1.0) -> nn.Module:
    """U(-b, b) weights with ``b = gain * sqrt(3 / fan_in)``; zero bias."""
    w = layer.weight
    fan_in = w[0].numel()
    bound = gain * math.sqrt(3.0 / fan_in)
    nn.init.uniform_(w, -bound, bound)
    if getattr(layer, "bias", None) is not None:
        nn.init.zeros_(layer.bias)
    return layer
