"""Synthetic fluorescence-like image generator with exact ground truth.

Cells are elliptical Gaussian blobs on a noisy dark background. The mask is
analytic: a pixel is foreground where the noiseless blob profile exceeds half
of that blob's peak, so the half-max ellipse IS the ground-truth object. In
non-overlapping mode blob centers keep a minimum separation of twice the
maximum radius, which makes connected-component counts equal the number of
generated blobs by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import Sample

# half-max radius r relates to the Gaussian sigma by r = sigma * sqrt(2 ln 2)
_HALF_MAX = math.sqrt(2.0 * math.log(2.0))

# fluorescent stain color: bright yellow on dark tissue
_CELL_RGB = (1.0, 0.9, 0.25)


@dataclass
class SynthConfig:
    image_size: tuple[int, int] = (256, 256)  # (height, width)
    cell_count_mean: float = 8.0  # Poisson mean
    radius_range: tuple[float, float] = (8.0, 25.0)
    intensity_range: tuple[float, float] = (0.4, 1.0)
    background_noise_sigma: float = 0.03
    non_overlapping: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.radius_range[0] < 2:
            raise ValueError(f"radius_range min must be >= 2 px, got {self.radius_range[0]}")
        if self.cell_count_mean < 0:
            raise ValueError("cell_count_mean must be >= 0")

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "cell_count_mean": self.cell_count_mean,
            "radius_range": list(self.radius_range),
            "intensity_range": list(self.intensity_range),
            "background_noise_sigma": self.background_noise_sigma,
            "non_overlapping": self.non_overlapping,
            "seed": self.seed,
        }


@dataclass
class SynthSample:
    sample: Sample
    true_count: int
    true_centroids: list[tuple[float, float]] = field(default_factory=list)


def generate(cfg: SynthConfig, n: int) -> list[SynthSample]:
    """Generate ``n`` samples, deterministic under ``cfg.seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    return [_one_image(cfg, rng, idx) for idx in range(n)]


def _one_image(cfg: SynthConfig, rng: np.random.Generator, idx: int) -> SynthSample:
    h, w = cfg.image_size
    r_lo, r_hi = cfg.radius_range
    count = int(rng.poisson(cfg.cell_count_mean))

    centers: list[tuple[float, float]] = []
    blobs = []
    min_sep = 2.0 * r_hi
    for _ in range(count):
        center = _place_center(rng, h, w, centers, min_sep if cfg.non_overlapping else None)
        if center is None:
            continue  # crowded image in non-overlap mode: drop the extra blob
        centers.append(center)
        blobs.append(
            {
                "center": center,
                "radii": rng.uniform(r_lo, r_hi, size=2),
                "theta": rng.uniform(0.0, math.pi),
                "peak": rng.uniform(*cfg.intensity_range),
            }
        )

    signal = np.zeros((h, w), dtype=np.float64)
    mask = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for blob in blobs:
        cy, cx = blob["center"]
        ry, rx = blob["radii"]
        ct, st = math.cos(blob["theta"]), math.sin(blob["theta"])
        # rotated elliptical Mahalanobis distance in half-max units
        u = ((yy - cy) * ct + (xx - cx) * st) / ry
        v = (-(yy - cy) * st + (xx - cx) * ct) / rx
        d2 = (u * u + v * v) * _HALF_MAX**2
        profile = blob["peak"] * np.exp(-0.5 * d2)
        signal = np.maximum(signal, profile)
        mask |= (profile > blob["peak"] / 2.0).astype(np.uint8)

    image = np.empty((h, w, 3), dtype=np.float64)
    for ch, weight in enumerate(_CELL_RGB):
        noise = rng.normal(0.0, cfg.background_noise_sigma, size=(h, w))
        image[:, :, ch] = np.clip(signal * weight + 0.05 + noise, 0.0, 1.0)

    sample = Sample(
        image_id=f"synth_{cfg.seed}_{idx:04d}",
        image=image.astype(np.float32),
        mask=mask,
        source_path="<synthetic>",
    )
    centroids = [tuple(float(c) for c in blob["center"]) for blob in blobs]
    return SynthSample(sample=sample, true_count=len(blobs), true_centroids=centroids)


def _place_center(rng, h, w, existing, min_sep):
    """Sample a blob center; with min_sep, rejection-sample against existing."""
    margin = 2.0
    for _ in range(200):
        cy = rng.uniform(margin, h - margin)
        cx = rng.uniform(margin, w - margin)
        if min_sep is None:
            return (cy, cx)
        if all((cy - ey) ** 2 + (cx - ex) ** 2 >= min_sep**2 for ey, ex in existing):
            return (cy, cx)
    return None


def write_dataset(cfg: SynthConfig, n: int, out_dir: Path) -> list[SynthSample]:
    """Write the standard dataset layout plus truth.json with counts/centroids."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    masks_dir = out_dir / "ground_truths"
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)

    generated = generate(cfg, n)
    truth = {}
    for item in generated:
        s = item.sample
        img_u8 = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(img_u8).save(images_dir / f"{s.image_id}.png")
        Image.fromarray(s.mask * 255).save(masks_dir / f"{s.image_id}.png")
        truth[s.image_id] = {
            "count": item.true_count,
            "centroids": [list(c) for c in item.true_centroids],
        }
    payload = {"config": cfg.to_dict(), "n": n, "truth": truth}
    (out_dir / "truth.json").write_text(json.dumps(payload, indent=2))
    return generated


def load_truth(root_dir: Path) -> dict:
    """Counts/centroids previously written by write_dataset, keyed by image_id."""
    return json.loads((Path(root_dir) / "truth.json").read_text())["truth"]
