"""Command-line interface: ``lesionseg {train,eval,predict,ablate}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .checkpoint import load_state, read_checkpoint
from .config import ConfigError, RunConfig, read_config_file
from .data import Sample, load_pairs, read_image, resize, resize_image, split, synth_generate
from .metrics import METRIC_LABELS, METRIC_NAMES, MetricsReport, binarize, evaluate_dataset, predict_probabilities
from .seg_core import build_model, count_parameters
from .training import resume, train_model

logger = logging.getLogger("lesionseg")

ABLATIONS = (
    ("Baseline", (False, False, False)),
    ("Baseline+DK", (True, False, False)),
    ("Baseline+DK+ESAs", (True, True, False)),
    ("Ours", (True, True, True)),
)
SPLIT_NAMES = ("train", "val", "test")


# ---------------------------------------------------------------- data helpers

def resolve_dataset(run: RunConfig) -> List[Sample]:
    """``synth:N`` or a directory with ``images/`` and ``masks/``, resized to the input size."""
    if not run.data:
        raise ConfigError("no dataset given (use --data DIR or --data synth:N)")
    if run.data.startswith("synth:"):
        try:
            n = int(run.data.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad synthetic dataset {run.data!r}, expected synth:N") from None
        return synth_generate(n, run.model.input_size, run.synth_seed)
    return [resize(s, run.model.input_size) for s in load_pairs(run.data)]


def dataset_splits(run: RunConfig) -> Dict[str, List[Sample]]:
    samples = resolve_dataset(run)
    parts = split(samples, run.train.split, seed=run.model.seed)
    out = dict(zip(SPLIT_NAMES, parts))
    out["all"] = samples
    return out


def load_model(run: RunConfig, checkpoint_path):
    model = build_model(run.model)
    load_state(model, read_checkpoint(checkpoint_path)["model"])
    model.eval()
    return model


# ---------------------------------------------------------------- commands

def cmd_train(run: RunConfig, resume_from: Optional[str] = None) -> Dict[str, Path]:
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    parts = dataset_splits(run)
    torch.manual_seed(run.model.seed)
    model = build_model(run.model)
    optimizer, start = None, 0
    if resume_from:
        optimizer, start = resume(model, resume_from, run.train)
        logger.info("resuming from %s at epoch %d", resume_from, start)
    echo = run.to_dict()
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    logger.info("training %d parameters on %d samples (%d validation)",
                count_parameters(model), len(parts["train"]), len(parts["val"]))
    train_model(model, parts["train"], run.train, seed=run.model.seed, val_samples=parts["val"],
                start_epoch=start, optimizer=optimizer, out_dir=out, config_echo=echo)
    return {name: out / name for name in ("checkpoint_best.npz", "checkpoint_final.npz", "train_log.csv")}


def write_report(report: MetricsReport, out: Path, stem: str = "report") -> Dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{stem}.csv", "json": out / f"{stem}.json", "txt": out / f"{stem}.txt"}
    echo = "# config=" + json.dumps(report.config, sort_keys=True) + "\n"
    paths["csv"].write_text(echo + report.to_csv())
    paths["json"].write_text(report.to_json())
    paths["txt"].write_text(report.summary(stem))
    return paths


def cmd_eval(run: RunConfig, split_name: str = "all") -> MetricsReport:
    if not run.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    samples = dataset_splits(run)[split_name]
    if not samples:
        raise ValueError(f"the {split_name!r} split is empty; nothing to evaluate")
    model = load_model(run, run.checkpoint)
    report = evaluate_dataset(model, samples, run.threshold, config=run.echo())
    write_report(report, Path(run.out))
    sys.stdout.write(report.summary(f"{split_name} split"))
    return report


def contour(mask: np.ndarray) -> np.ndarray:
    mask = mask.astype(bool)
    return mask & ~ndimage.binary_erosion(mask)


def render_overlay(image: np.ndarray, prob: np.ndarray, threshold: float) -> np.ndarray:
    """``H x W x 3`` uint8 image with the thresholded outline drawn in green."""
    rgb = np.round(np.clip(image.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    edge = contour(binarize(prob, threshold))
    rgb[edge] = (0, 255, 0)
    return rgb


def cmd_predict(run: RunConfig, image_path) -> Dict[str, Path]:
    if not run.checkpoint:
        raise ConfigError("predict needs --checkpoint")
    image_path = Path(image_path)
    try:
        image = read_image(image_path)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {image_path}: {exc}") from exc
    model = load_model(run, run.checkpoint)
    x = torch.as_tensor(resize_image(image, run.model.input_size))[None]
    with torch.no_grad():
        prob = predict_probabilities(model, x.to(next(model.parameters()).dtype))
        if tuple(image.shape[-2:]) != tuple(run.model.input_size):
            prob = torch.nn.functional.interpolate(prob, size=image.shape[-2:], mode="bilinear",
                                                   align_corners=False)
    prob = prob[0, 0].numpy()
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"prob": out / f"{image_path.stem}_prob.png", "overlay": out / f"{image_path.stem}_overlay.png"}
    Image.fromarray(np.round(prob * 255).astype(np.uint8)).save(paths["prob"])
    Image.fromarray(render_overlay(image, prob, run.threshold)).save(paths["overlay"])
    return paths


def cmd_ablate(run: RunConfig) -> List[dict]:
    """Train and evaluate the four ablation configurations with a shared seed."""
    parts = dataset_splits(run)
    eval_set = parts["test"] or parts["val"] or parts["train"]
    out = Path(run.out)
    rows = []
    for name, flags in ABLATIONS:
        sub = RunConfig(model=run.model.with_flags(*flags), train=run.train, data=run.data,
                        out=str(out / name), threshold=run.threshold, synth_seed=run.synth_seed)
        model = build_model(sub.model)
        logger.info("ablation %s: %d parameters", name, count_parameters(model))
        train_model(model, parts["train"], sub.train, seed=sub.model.seed, val_samples=parts["val"],
                    out_dir=sub.out, config_echo=sub.to_dict())
        best = Path(sub.out) / "checkpoint_best.npz"
        load_state(model, read_checkpoint(best)["model"])
        report = evaluate_dataset(model, eval_set, run.threshold, config=sub.echo())
        write_report(report, Path(sub.out))
        rows.append({"method": name, "params": count_parameters(model), **report.aggregate})
    write_ablation_table(rows, out)
    return rows


def write_ablation_table(rows: Sequence[dict], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "params", *METRIC_NAMES])
    for r in rows:
        writer.writerow([r["method"], r["params"], *(repr(r[k]) for k in METRIC_NAMES)])
    (out / "ablation.csv").write_text(buf.getvalue())
    (out / "ablation.json").write_text(json.dumps(list(rows), indent=2) + "\n")
    lines = [f"{'Methods':<18}{'params':>10} " + " ".join(f"{lab:>7}" for lab in METRIC_LABELS)]
    for r in rows:
        vals = " ".join(f"{100 * r[k]:7.2f}" for k in METRIC_NAMES)
        lines.append(f"{r['method']:<18}{r['params']:>10} {vals}")
    text = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(text)
    sys.stdout.write(text)


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key-value config file (JSON or 'key = value' lines)")
    common.add_argument("--data", help="dataset directory or synth:N")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint file (.npz)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threshold", type=float)
    common.add_argument("--epochs", type=int, dest="n_epoch")
    common.add_argument("--batch-size", type=int, dest="batch_size")
    common.add_argument("--no-dk", action="store_false", dest="use_dk", default=None)
    common.add_argument("--no-esa", action="store_false", dest="use_esa", default=None)
    common.add_argument("--no-lca", action="store_false", dest="use_lca", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lesionseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    train = sub.add_parser("train", parents=[common], help="train a model")
    train.add_argument("--resume", help="continue training from this checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--split", choices=("all", *SPLIT_NAMES), default="all")
    pr = sub.add_parser("predict", parents=[common], help="predict one image")
    pr.add_argument("image")
    sub.add_parser("ablate", parents=[common], help="train and compare the four ablation settings")
    return parser


def run_config_from_args(args) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(read_config_file(args.config))
    elif getattr(args, "checkpoint", None) and args.command in ("eval", "predict"):
        values.update(read_checkpoint(args.checkpoint)["meta"]["config"])
        values.pop("out", None)
    overrides = {
        "data": args.data, "out": args.out, "checkpoint": args.checkpoint, "seed": args.seed,
        "threshold": args.threshold, "n_epoch": args.n_epoch, "batch_size": args.batch_size,
        "use_dk": args.use_dk, "use_esa": args.use_esa, "use_lca": args.use_lca,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_mapping(values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = run_config_from_args(args)
        if args.command == "train":
            cmd_train(run, args.resume)
        elif args.command == "eval":
            cmd_eval(run, args.split)
        elif args.command == "predict":
            for path in cmd_predict(run, args.image).values():
                print(path)
        elif args.command == "ablate":
            cmd_ablate(run)
    except (ValueError, FileNotFoundError) as exc:
        print(f"lesionseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
