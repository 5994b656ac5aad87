"""Five-stage encoder-decoder with a dynamic segmentation head.

Stage ``i`` (1..5) of both encoder and decoder works at ``1 / 2**i`` of the
input resolution, so the deepest prediction ``P5`` is coarsest and ``P1``
(half the input resolution) is the final output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn as nn
from torch import Tensor

from .attention import ESABlock, LCABlock
from .config import NUM_STAGES, UNIFIED_DIM, ConfigError, ModelConfig, check_input_size
from .dynamic_kernel import KernelGenerator, KernelUpdate, extract_lesion_feature, predict, upsample2
from .init import fan_in_uniform_

STAGES = tuple(range(NUM_STAGES, 0, -1))  # decoding order 5..1


@dataclass
class FeatureMap:
    values: Tensor
    stage: int
    kind: str  # "encoder" | "decoder" | "unified"

    def __post_init__(self):
        if self.kind not in ("encoder", "decoder", "unified"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if not 1 <= self.stage <= NUM_STAGES:
            raise ValueError(f"stage must lie in 1..{NUM_STAGES}, got {self.stage}")
        if self.kind == "unified" and self.values.shape[-3] != UNIFIED_DIM:
            raise ValueError(f"unified features must have {UNIFIED_DIM} channels")

    @property
    def resolution(self):
        return tuple(self.values.shape[-2:])


@dataclass
class ForwardTrace:
    """Everything produced by one forward pass, keyed by stage number."""

    predictions: Dict[int, Tensor] = field(default_factory=dict)
    kernels: Dict[int, Tensor] = field(default_factory=dict)
    features: List[FeatureMap] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.predictions[1]

    def ordered_predictions(self) -> List[Tensor]:
        """Predictions ``[P5, P4, P3, P2, P1]``."""
        return [self.predictions[i] for i in STAGES if i in self.predictions]


def conv_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    conv = fan_in_uniform_(nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), gain=2 ** 0.5)
    return nn.Sequential(conv, nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class Encoder(nn.Module):
    """Plain convolutional encoder; each block halves the resolution."""

    def __init__(self, channels, in_channels: int = 3):
        super().__init__()
        blocks = []
        for c in channels:
            blocks.append(nn.Sequential(conv_bn_relu(in_channels, c, stride=2), conv_bn_relu(c, c)))
            in_channels = c
        self.blocks = nn.ModuleList(blocks)

    def forward(self, image: Tensor) -> List[Tensor]:
        check_input_size(image.shape[-2:])
        feats = []
        x = image
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class DecoderStage(nn.Module):
    """Upsample the deeper decoder output, concatenate the skip, two conv layers.

    The deepest stage has no deeper input and works on the skip alone.
    """

    def __init__(self, skip_channels: int, deeper_channels: int, out_channels: int):
        super().__init__()
        self.body = nn.Sequential(conv_bn_relu(skip_channels + deeper_channels, out_channels),
                                  conv_bn_relu(out_channels, out_channels))

    def forward(self, deeper: Optional[Tensor], skip: Tensor) -> Tensor:
        if deeper is None:
            return self.body(skip)
        up = upsample2(deeper)
        if up.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"upsampled decoder size {tuple(up.shape[-2:])} != skip size {tuple(skip.shape[-2:])}")
        return self.body(torch.cat([up, skip], dim=1))


class LesionSegNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = cfg = config
        enc, dec = cfg.encoder_channels, cfg.decoder_channels
        self.encoder = Encoder(enc)
        self.decoder = nn.ModuleList(
            DecoderStage(enc[i], dec[i + 1] if i + 1 < NUM_STAGES else 0, dec[i]) for i in range(NUM_STAGES))
        self.unify = nn.ModuleList(fan_in_uniform_(nn.Conv2d(c, UNIFIED_DIM, 1)) for c in dec)
        if cfg.use_dk:
            self.kernel_generator = KernelGenerator(enc[-1], cfg.kernel_size)
            self.kernel_update = KernelUpdate(UNIFIED_DIM)
        else:
            self.static_head = fan_in_uniform_(nn.Conv2d(UNIFIED_DIM, 1, 1))
        if cfg.use_esa:
            self.esa = nn.ModuleDict({str(s): ESABlock(enc[s - 1], cfg.heads, cfg.ffn_expansion)
                                      for s in sorted(cfg.esa_stages)})
        if cfg.use_lca:
            self.lca = nn.ModuleDict({
                str(s): LCABlock(dec[s - 1], cfg.heads, cfg.ffn_expansion, cfg.lca_mode, cfg.lesion_average)
                for s in sorted(cfg.lca_stages)})

    def encode(self, image: Tensor) -> List[Tensor]:
        if tuple(image.shape[-2:]) != self.config.input_size:
            check_input_size(image.shape[-2:])
            raise ConfigError(f"image size {tuple(image.shape[-2:])} != configured input_size {self.config.input_size}")
        return self.encoder(image)

    def forward(self, image: Tensor) -> ForwardTrace:
        cfg = self.config
        enc = self.encode(image)
        trace = ForwardTrace()
        trace.features.extend(FeatureMap(e, i + 1, "encoder") for i, e in enumerate(enc))
        skips = list(enc)
        if cfg.use_esa:
            for s in cfg.esa_stages:
                skips[s - 1] = self.esa[str(s)](skips[s - 1])

        deeper = kernel = logits = None
        for i in STAGES:
            d = self.decoder[i - 1](deeper, skips[i - 1])
            unified = self.unify[i - 1](d)
            if cfg.use_dk:
                if kernel is None:
                    kernel = self.kernel_generator(enc[-1])
                else:
                    lesion = extract_lesion_feature(unified, logits, upsample=True, average=cfg.lesion_average)
                    kernel = self.kernel_update(kernel, lesion, stage=i)
                trace.kernels[i] = kernel
                logits = predict(kernel, unified)
            else:
                logits = self.static_head(unified)
            trace.predictions[i] = logits
            trace.features.append(FeatureMap(d, i, "decoder"))
            trace.features.append(FeatureMap(unified, i, "unified"))
            if cfg.use_lca and i in cfg.lca_stages:
                d = self.lca[str(i)](d, logits)
            deeper = d
        return trace


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_model(config: ModelConfig) -> LesionSegNet:
    """Construct a model with parameters drawn from ``config.seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(config.seed)
    try:
        return LesionSegNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
