"""Dataset ingestion, splitting, augmentation, resizing and synthetic data.

Images are ``3 x H x W`` float32 arrays in [0, 1]; masks are ``1 x H x W``
uint8 arrays in {0, 1}.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .config import ConfigError, check_input_size

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValueError(f"sample {self.id}: expected 3xHxW image and 1xHxW mask")
        if self.image.shape[-2:] != self.mask.shape[-2:]:
            raise ValueError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ in size")


# ---------------------------------------------------------------- ingestion

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)[None]


def _index_by_stem(folder: Path):
    out = {}
    for p in sorted(folder.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS:
            out[p.stem] = p
    return out


def load_pairs(root) -> List[Sample]:
    """Load ``root/images/*`` and ``root/masks/*`` pairs matched by file stem."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory {d}")
    images, masks = _index_by_stem(img_dir), _index_by_stem(mask_dir)
    if not images and not masks:
        raise ValueError(f"no images found under {root}")
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        detail = ", ".join(f"{s} ({'no mask' if s in images else 'no image'})" for s in orphans)
        raise ValueError(f"unmatched files: {detail}")
    return [Sample(read_image(images[s]), read_mask(masks[s]), s) for s in sorted(images)]


def save_pairs(samples: Sequence[Sample], root) -> None:
    """Write samples in the ``images/`` + ``masks/`` PNG layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.mask[0] * 255).save(root / "masks" / f"{s.id}.png")


# ---------------------------------------------------------------- splitting

def split_sizes(n: int, ratios: Sequence[float]) -> Tuple[int, ...]:
    """Floor allocation with the remainder going to the first (train) part.

    Every part with a positive ratio receives at least one sample, taken from
    the train part.
    """
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError(f"invalid split ratios {tuple(ratios)}")
    needed = sum(r > 0 for r in ratios)
    if n < needed:
        raise ValueError(f"{n} samples cannot fill {needed} non-empty partitions")
    sizes = [math.floor(n * r + 1e-9) for r in ratios]
    sizes[0] += n - sum(sizes)
    for i in (1, 2):
        if ratios[i] > 0 and sizes[i] == 0:
            sizes[i] = 1
            sizes[0] -= 1
    if ratios[0] > 0 and sizes[0] < 1:
        raise ValueError(f"{n} samples leave no training data for ratios {tuple(ratios)}")
    return tuple(sizes)


def split(samples: Sequence[Sample], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle, then contiguous (train, val, test) partition."""
    samples = list(samples)
    n_train, n_val, _ = split_sizes(len(samples), ratios)
    order = np.random.default_rng(seed).permutation(len(samples))
    shuffled = [samples[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


# ---------------------------------------------------------------- resizing

def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def resize_mask(mask: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resize; output row ``r`` takes source row ``floor(r * H / h)``."""
    rows = nearest_indices(mask.shape[-2], size[0])
    cols = nearest_indices(mask.shape[-1], size[1])
    return mask[..., rows[:, None], cols[None, :]]


def resize_image(image: np.ndarray, size) -> np.ndarray:
    if tuple(image.shape[-2:]) == tuple(size):
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0]
    return out.clamp_(0, 1).numpy()


def resize(sample: Sample, size) -> Sample:
    size = tuple(size)
    check_input_size(size)
    return Sample(resize_image(sample.image, size), resize_mask(sample.mask, size), sample.id)


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0        # degrees
    crop_area: float = 1.0    # fraction of the image area kept
    crop_y: float = 0.0       # offset within the vertical slack, in [0, 1]
    crop_x: float = 0.0

    @property
    def is_resampling(self) -> bool:
        return self.angle != 0.0 or self.crop_area != 1.0


MAX_ANGLE = 15.0
MIN_CROP_AREA = 0.9


def draw_augment_params(rng) -> AugmentParams:
    return AugmentParams(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        angle=float(rng.uniform(-MAX_ANGLE, MAX_ANGLE)),
        crop_area=float(rng.uniform(MIN_CROP_AREA, 1.0)),
        crop_y=float(rng.random()),
        crop_x=float(rng.random()),
    )


def _source_coords(params: AugmentParams, h: int, w: int) -> np.ndarray:
    """Source (row, col) for every output pixel of the rotate + crop stage."""
    side = math.sqrt(params.crop_area)
    ch, cw = h * side, w * side
    y0, x0 = params.crop_y * (h - ch), params.crop_x * (w - cw)
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    y = y0 + (r + 0.5) * ch / h - 0.5
    x = x0 + (c + 0.5) * cw / w - 0.5
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = math.radians(params.angle)
    cos, sin = math.cos(t), math.sin(t)
    sy = cy + cos * (y - cy) - sin * (x - cx)
    sx = cx + sin * (y - cy) + cos * (x - cx)
    return np.stack([sy, sx])


def transform_array(arr: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    """Apply the geometric augmentation to a ``C x H x W`` array.

    ``order`` is the spline order (1 bilinear for images, 0 nearest for
    masks). Pixels mapped from outside the frame take the nearest edge value.
    """
    out = arr
    if params.hflip:
        out = out[..., :, ::-1]
    if params.vflip:
        out = out[..., ::-1, :]
    if params.is_resampling:
        coords = _source_coords(params, *out.shape[-2:])
        out = np.stack([ndimage.map_coordinates(ch, coords, order=order, mode="nearest") for ch in out])
    return np.ascontiguousarray(out)


def augment(sample: Sample, rng, params: AugmentParams = None) -> Sample:
    """Random flips, rotation and crop applied jointly to image and mask."""
    if params is None:
        params = draw_augment_params(rng)
    image = np.clip(transform_array(sample.image, params, order=1), 0.0, 1.0).astype(np.float32)
    mask = transform_array(sample.mask, params, order=0).astype(np.uint8)
    return Sample(image, mask, sample.id)


def sample_rng(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample) so augmentation order never matters."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode())])


# ---------------------------------------------------------------- synthetic data

MIN_FG, MAX_FG = 0.02, 0.5


def _ellipse(h: int, w: int, rng) -> np.ndarray:
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ay, ax = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
    t = rng.uniform(0, math.pi)
    r, c = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    u = (r - cy) * math.cos(t) + (c - cx) * math.sin(t)
    v = -(r - cy) * math.sin(t) + (c - cx) * math.cos(t)
    return (u / ay) ** 2 + (v / ax) ** 2 <= 1.0


def synth_sample(size, rng, sample_id: str) -> Sample:
    h, w = size
    while True:
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(rng.integers(1, 3)):
            mask |= _ellipse(h, w, rng)
        if MIN_FG <= mask.mean() <= MAX_FG:
            break
    base = np.array([0.55, 0.3, 0.25]) + rng.uniform(-0.1, 0.1, 3)
    coarse = rng.normal(0.0, 0.08, size=(3, 4, 4))
    noise = ndimage.zoom(coarse, (1, h / 4, w / 4), order=1, mode="nearest")[:, :h, :w]
    image = base[:, None, None] + noise
    offset = np.array([0.25, 0.12, 0.05]) * rng.uniform(0.8, 1.2)
    image = image + offset[:, None, None] * mask[None]
    image = ndimage.gaussian_filter(image, sigma=(0, 1.0, 1.0))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, mask[None].astype(np.uint8), sample_id)


def synth_generate(n: int, size=(64, 64), seed: int = 0) -> List[Sample]:
    """``n`` polyp-like samples: smooth noisy background with 1-2 brighter blurred ellipses."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [synth_sample(tuple(size), np.random.default_rng([seed, i]), f"synth_{i:04d}") for i in range(n)]


def to_batch(samples: Sequence[Sample], dtype=torch.float32):
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype)
    masks = torch.as_tensor(np.stack([s.mask for s in samples]), dtype=dtype)
    return images, masks
