"""Image/mask loading, deterministic splits, crops, and augmentation.

Dataset layout on disk::

    <root>/images/*.png|*.tif
    <root>/ground_truths/*.png

Image and mask files are matched by exact filename stem. Masks are
single-channel; any nonzero pixel is foreground.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .hashes import digest_json

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


@dataclass
class Sample:
    """One microscopy image with its pixel-wise binary ground truth."""

    image_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    source_path: str = ""
    animal_id: str | None = None

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise ValueError(
                f"image/mask dims differ for {self.image_id}: "
                f"{self.image.shape[:2]} vs {self.mask.shape[:2]}"
            )

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class SplitSpec:
    train_fraction: float
    seed: int
    train_ids: list[str]
    val_ids: list[str]
    split_hash: str = ""

    def __post_init__(self):
        if not self.split_hash:
            self.split_hash = compute_split_hash(self.train_ids, self.val_ids)

    def to_dict(self) -> dict:
        return {
            "fraction": self.train_fraction,
            "seed": self.seed,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "split_hash": self.split_hash,
        }

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Path) -> "SplitSpec":
        raw = json.loads(Path(path).read_text())
        return cls(
            train_fraction=raw["fraction"],
            seed=raw["seed"],
            train_ids=raw["train_ids"],
            val_ids=raw["val_ids"],
            split_hash=raw["split_hash"],
        )


def compute_split_hash(train_ids, val_ids) -> str:
    return digest_json({"train": sorted(train_ids), "val": sorted(val_ids)})


@dataclass
class AugmentConfig:
    crop_size: tuple[int, int] = (512, 512)
    max_rotation_deg: float = 30.0
    zoom_range: tuple[float, float] = (1.0, 1.3)
    brightness_delta: float = 0.2  # multiplicative factor in [1-d, 1+d]
    contrast_delta: float = 0.1
    enable_warp: bool = False

    def __post_init__(self):
        if self.enable_warp:
            raise ValueError("warping distorts cell morphology and is not supported")

    def to_dict(self) -> dict:
        return {
            "crop_size": list(self.crop_size),
            "max_rotation_deg": self.max_rotation_deg,
            "zoom_range": list(self.zoom_range),
            "brightness_delta": self.brightness_delta,
            "contrast_delta": self.contrast_delta,
            "enable_warp": self.enable_warp,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "AugmentConfig":
        return cls(
            crop_size=tuple(raw.get("crop_size", (512, 512))),
            max_rotation_deg=raw.get("max_rotation_deg", 30.0),
            zoom_range=tuple(raw.get("zoom_range", (1.0, 1.3))),
            brightness_delta=raw.get("brightness_delta", 0.2),
            contrast_delta=raw.get("contrast_delta", 0.1),
            enable_warp=raw.get("enable_warp", False),
        )


def load_dataset(root_dir: Path) -> list[Sample]:
    """Load all image/mask pairs under root_dir, ordered by image_id.

    Raises FileNotFoundError for an image without a matching mask, and
    ValueError when a pair's dimensions disagree.
    """
    root_dir = Path(root_dir)
    images_dir = root_dir / "images"
    masks_dir = root_dir / "ground_truths"

    image_files = sorted(
        (p for p in images_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.stem,
    ) if images_dir.is_dir() else []
    if not image_files:
        logger.warning("no images found under %s", images_dir)
        return []

    mask_by_stem = {p.stem: p for p in masks_dir.glob("*.png")} if masks_dir.is_dir() else {}

    samples = []
    for img_path in image_files:
        mask_path = mask_by_stem.get(img_path.stem)
        if mask_path is None:
            raise FileNotFoundError(f"no ground-truth mask for image {img_path.name}")
        samples.append(load_pair(img_path, mask_path))
    return samples


def load_pair(img_path: Path, mask_path: Path) -> Sample:
    image = load_image(img_path)
    mask_raw = np.asarray(Image.open(mask_path))
    if mask_raw.ndim == 3:
        mask_raw = mask_raw[:, :, 0]
    if image.shape[:2] != mask_raw.shape[:2]:
        raise ValueError(
            f"dimension mismatch: {img_path.name} is {image.shape[:2]} "
            f"but {mask_path.name} is {mask_raw.shape[:2]}"
        )
    mask = (mask_raw > 0).astype(np.uint8)
    return Sample(
        image_id=img_path.stem,
        image=image,
        mask=mask,
        source_path=str(img_path),
    )


def load_image(img_path: Path) -> np.ndarray:
    """RGB image as float32 in [0, 1]."""
    arr = np.asarray(Image.open(img_path).convert("RGB"))
    return (arr.astype(np.float32) / 255.0).clip(0.0, 1.0)


def make_split(samples: list[Sample], fraction: float = 0.75, seed: int = 0) -> SplitSpec:
    """Deterministic shuffled partition; train count = floor(fraction * N)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to split")
    ids = sorted(s.image_id for s in samples)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_train = math.floor(fraction * len(ids))
    train_ids = [ids[i] for i in order[:n_train]]
    val_ids = [ids[i] for i in order[n_train:]]
    return SplitSpec(train_fraction=fraction, seed=seed, train_ids=train_ids, val_ids=val_ids)


def select(samples: list[Sample], ids: list[str]) -> list[Sample]:
    by_id = {s.image_id: s for s in samples}
    return [by_id[i] for i in ids]


def random_crop(sample: Sample, size: tuple[int, int], rng: np.random.Generator) -> Sample:
    """Crop image and mask with the same window, origin uniform over valid positions."""
    ch, cw = size
    if ch > sample.height or cw > sample.width:
        raise ValueError(
            f"crop {size} exceeds image dims ({sample.height}, {sample.width})"
        )
    top = int(rng.integers(0, sample.height - ch + 1))
    left = int(rng.integers(0, sample.width - cw + 1))
    return Sample(
        image_id=sample.image_id,
        image=sample.image[top : top + ch, left : left + cw],
        mask=sample.mask[top : top + ch, left : left + cw],
        source_path=sample.source_path,
        animal_id=sample.animal_id,
    )


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Rotation and zoom on image+mask, lighting on image only.

    Masks are resampled nearest-neighbor so they stay binary; images are
    bilinear. Output intensities are clipped to [0, 1]. Identity parameters
    leave the sample bit-unchanged.
    """
    if cfg.enable_warp:
        raise ValueError("warping is not supported")
    angle = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    zoom = float(rng.uniform(*cfg.zoom_range))
    brightness = float(rng.uniform(1.0 - cfg.brightness_delta, 1.0 + cfg.brightness_delta))
    contrast = float(rng.uniform(1.0 - cfg.contrast_delta, 1.0 + cfg.contrast_delta))
    return apply_augment(sample, angle=angle, zoom=zoom, brightness=brightness, contrast=contrast)


def apply_augment(
    sample: Sample,
    angle: float = 0.0,
    zoom: float = 1.0,
    brightness: float = 1.0,
    contrast: float = 1.0,
) -> Sample:
    """Deterministic core of augment(); parameters instead of an rng."""
    image, mask = sample.image, sample.mask
    if angle != 0.0 or zoom != 1.0:
        matrix, offset = _inverse_affine(image.shape[:2], angle, zoom)
        channels = [
            ndimage.affine_transform(image[:, :, c].astype(np.float64), matrix, offset=offset, order=1, mode="constant", cval=0.0)
            for c in range(image.shape[2])
        ]
        image = np.stack(channels, axis=2).astype(np.float32)
        mask = ndimage.affine_transform(mask, matrix, offset=offset, order=0, mode="constant", cval=0)
    if brightness != 1.0 or contrast != 1.0:
        image = image.astype(np.float32) * brightness
        mean = image.mean()
        image = mean + contrast * (image - mean)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    mask = (mask > 0).astype(np.uint8)
    return Sample(
        image_id=sample.image_id,
        image=image,
        mask=mask,
        source_path=sample.source_path,
        animal_id=sample.animal_id,
    )


def _inverse_affine(shape, angle_deg, zoom):
    """Output->input map: rotate by angle_deg CCW about the image center, then zoom."""
    h, w = shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = math.radians(angle_deg)
    # rows grow downward: CCW rotation of content = [[cos, sin], [-sin, cos]] on (row, col)
    rot = np.array([[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]])
    inv = rot.T / zoom
    offset = center - inv @ center
    return inv, offset
