"""Losses, deep supervision, poly learning rate and momentum SGD."""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .config import TrainConfig


def bce_loss(logits: Tensor, gt: Tensor) -> Tensor:
    """Mean binary cross-entropy on logits (numerically stable form)."""
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(gt.shape)}")
    return F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))


def dice_loss(logits: Tensor, gt: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss, computed per image over ``C x H x W`` and averaged over the batch."""
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(gt.shape)}")
    p = torch.sigmoid(logits).flatten(1)
    y = gt.to(logits.dtype).flatten(1)
    dice = (2 * (p * y).sum(1) + smooth) / (p.sum(1) + y.sum(1) + smooth)
    return (1 - dice).mean()


def downsample_gt(mask: Tensor, size) -> Tensor:
    """Nearest-neighbour resize of a ``B x 1 x H x W`` mask; output pixel ``r``
    takes source row ``floor(r * H / h)``."""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.interpolate(mask.to(torch.float32), size=tuple(size), mode="nearest").to(mask.dtype)


def stage_loss(logits: Tensor, gt: Tensor, smooth: float = 1.0) -> Tensor:
    return bce_loss(logits, gt) + dice_loss(logits, gt, smooth)


def deep_supervision_loss(predictions, gt: Tensor, smooth: float = 1.0) -> Tensor:
    """Equal-weight sum of BCE + Dice over every prediction against the
    ground truth downsampled to that prediction's resolution.

    ``predictions`` may be a ForwardTrace or any iterable of logit maps.
    """
    if hasattr(predictions, "ordered_predictions"):
        predictions = predictions.ordered_predictions()
    total = 0.0
    for logits in predictions:
        total = total + stage_loss(logits, downsample_gt(gt, logits.shape[-2:]), smooth)
    return total


def poly_lr(epoch: float, cfg: TrainConfig) -> float:
    """``lr_init * (1 - epoch / n_epoch) ** power`` for ``0 <= epoch < n_epoch``."""
    if not 0 <= epoch < cfg.n_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.n_epoch})")
    return cfg.lr_init * (1 - epoch / cfg.n_epoch) ** cfg.power


@torch.no_grad()
def sgd_update(params: Sequence[Tensor], grads: Sequence[Optional[Tensor]], lr: float,
               cfg: TrainConfig, buffers: Optional[List[Optional[Tensor]]] = None) -> Sequence[Tensor]:
    """One in-place momentum SGD step.

    Per parameter: ``g += wd * p``, ``v = m * v + g``, ``p -= lr * v``. The
    first step starts from ``v = 0``. ``buffers`` holds the velocities and is
    filled lazily; pass the same list on every call. Parameters whose
    gradient is ``None`` are skipped.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if buffers is None:
        buffers = [None] * len(params)
    elif len(buffers) < len(params):
        buffers.extend([None] * (len(params) - len(buffers)))
    for idx, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        d = g.add(p, alpha=cfg.weight_decay) if cfg.weight_decay else g.clone()
        if cfg.momentum:
            v = buffers[idx]
            if v is None:
                v = buffers[idx] = d
            else:
                v.mul_(cfg.momentum).add_(d)
            d = v
        p.add_(d, alpha=-lr)
    return params


class MomentumSGD:
    """Keeps velocity buffers for a fixed parameter list across steps."""

    def __init__(self, params: Iterable[Tensor], cfg: TrainConfig):
        self.params = [p for p in params if p.requires_grad]
        self.cfg = cfg
        self.buffers: List[Optional[Tensor]] = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        sgd_update(self.params, [p.grad for p in self.params], lr, self.cfg, self.buffers)

    def state_dict(self) -> Dict[str, Tensor]:
        return {str(i): b for i, b in enumerate(self.buffers) if b is not None}

    def load_state_dict(self, state: Dict[str, Tensor]):
        for key, value in state.items():
            i = int(key)
            if value.shape != self.params[i].shape:
                raise ValueError(f"momentum buffer {i} shape {tuple(value.shape)} != {tuple(self.params[i].shape)}")
            self.buffers[i] = value.clone().to(self.params[i].dtype)
