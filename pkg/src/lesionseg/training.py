"""Deep-supervision training loop with poly learning rate and momentum SGD."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_state, read_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Sample, augment, sample_rng, to_batch
from .metrics import evaluate_dataset
from .objective import MomentumSGD, deep_supervision_loss, poly_lr

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "loss", "val_dice")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_dice: Optional[float] = None

    def line(self) -> str:
        val = "" if self.val_dice is None else f" val_dice={self.val_dice:.6f}"
        return f"epoch {self.epoch:4d} lr={self.lr:.6e} loss={self.loss!r}{val}"


@dataclass
class TrainResult:
    history: List[EpochRecord] = field(default_factory=list)
    best_dice: Optional[float] = None
    best_epoch: Optional[int] = None


def epoch_batches(samples: Sequence[Sample], epoch: int, cfg: TrainConfig, seed: int):
    """Shuffled (and optionally augmented) batches for one epoch; depends only
    on (seed, epoch), so a resumed run sees the same data as an uninterrupted one."""
    order = np.random.default_rng([seed, epoch]).permutation(len(samples))
    for start in range(0, len(samples), cfg.batch_size):
        chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
        if cfg.augment:
            chunk = [augment(s, sample_rng(seed, epoch, s.id)) for s in chunk]
        yield chunk


def train_model(model, train_samples: Sequence[Sample], cfg: TrainConfig, seed: int = 0,
                val_samples: Optional[Sequence[Sample]] = None, start_epoch: int = 0,
                end_epoch: Optional[int] = None, optimizer: Optional[MomentumSGD] = None,
                out_dir=None, config_echo: Optional[dict] = None,
                on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Train in place for epochs ``start_epoch .. end_epoch - 1`` (default: to ``n_epoch``).

    With ``out_dir`` set, every epoch refreshes ``checkpoint_final.npz`` (the
    latest state, so an interrupted run can be resumed), updates the
    best-validation checkpoint ``checkpoint_best.npz`` (validation Dice; training
    set when no validation samples are given) and appends to ``train_log.{csv,txt}``.
    """
    if not train_samples:
        raise ValueError("no training samples")
    optimizer = optimizer or MomentumSGD(model.parameters(), cfg)
    dtype = next(model.parameters()).dtype
    select_on = list(val_samples) if val_samples else list(train_samples)
    result = TrainResult()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        best_path = out_dir / "checkpoint_best.npz"
        if start_epoch > 0 and best_path.exists():
            meta = read_checkpoint(best_path)["meta"]
            result.best_dice, result.best_epoch = meta["extra"].get("val_dice"), meta["epoch"]

    end_epoch = cfg.n_epoch if end_epoch is None else min(end_epoch, cfg.n_epoch)
    for epoch in range(start_epoch, end_epoch):
        lr = poly_lr(epoch, cfg)
        model.train()
        losses = []
        for chunk in epoch_batches(train_samples, epoch, cfg, seed):
            images, masks = to_batch(chunk, dtype)
            optimizer.zero_grad()
            loss = deep_supervision_loss(model(images), masks, cfg.dice_smooth)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step(lr)
            losses.append(loss.item())
        record = EpochRecord(epoch, lr, float(np.mean(losses)))
        if out_dir is not None:
            record.val_dice = evaluate_dataset(model, select_on).dice
            if result.best_dice is None or record.val_dice > result.best_dice:
                result.best_dice, result.best_epoch = record.val_dice, epoch
                save_checkpoint(out_dir / "checkpoint_best.npz", model, config_echo or {}, epoch,
                                optimizer.state_dict(), {"val_dice": record.val_dice})
            save_checkpoint(out_dir / "checkpoint_final.npz", model, config_echo or {}, epoch,
                            optimizer.state_dict(), {"best_epoch": result.best_epoch})
            write_log(out_dir, [record], append=epoch > 0)
        result.history.append(record)
        logger.info(record.line())
        if on_epoch is not None:
            on_epoch(record)
    return result


def write_log(out_dir, history: Sequence[EpochRecord], append: bool = False) -> None:
    out_dir = Path(out_dir)
    csv_path, txt_path = out_dir / "train_log.csv", out_dir / "train_log.txt"
    mode = "a" if append and csv_path.exists() else "w"
    with open(csv_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(LOG_FIELDS)
        for r in history:
            writer.writerow([r.epoch, repr(r.lr), repr(r.loss), "" if r.val_dice is None else repr(r.val_dice)])
    with open(txt_path, mode) as fh:
        for r in history:
            fh.write(r.line() + "\n")


def resume(model, checkpoint_path, cfg: TrainConfig):
    """Restore model and momentum state; returns ``(optimizer, next_epoch)``."""
    ckpt = read_checkpoint(checkpoint_path)
    load_state(model, ckpt["model"])
    optimizer = MomentumSGD(model.parameters(), cfg)
    optimizer.load_state_dict({k: torch.as_tensor(v) for k, v in ckpt["momentum"].items()})
    return optimizer, int(ckpt["meta"]["epoch"]) + 1
