"""Logits to masks to labeled objects to counts.

A cell is one connected component of the thresholded foreground. Default
connectivity is 8-neighborhood so thin diagonal cell bodies stay one object;
components smaller than min_area_px are treated as noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

EIGHT_CONN = np.ones((3, 3), dtype=int)
FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)


@dataclass
class PostprocConfig:
    threshold_prob: float = 0.5
    connectivity: int = 8
    min_area_px: int = 20

    def __post_init__(self):
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")

    def to_dict(self) -> dict:
        return {
            "threshold_prob": self.threshold_prob,
            "connectivity": self.connectivity,
            "min_area_px": self.min_area_px,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PostprocConfig":
        return cls(
            threshold_prob=raw.get("threshold_prob", 0.5),
            connectivity=raw.get("connectivity", 8),
            min_area_px=raw.get("min_area_px", 20),
        )


@dataclass
class LabeledObjects:
    label_map: np.ndarray  # (H, W) int32, 0 = background, k = object k
    count: int
    areas_px: list[int] = field(default_factory=list)
    centroids: list[tuple[float, float]] = field(default_factory=list)  # (row, col)
    equivalent_diameters_px: list[float] = field(default_factory=list)


def binarize(logits: np.ndarray, threshold_prob: float = 0.5) -> np.ndarray:
    """sigmoid(logit) > threshold, strict: a logit of 0 at threshold 0.5 is background."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    probs = 1.0 / (1.0 + np.exp(-logits))
    return (probs > threshold_prob).astype(np.uint8)


def connected_components(mask: np.ndarray, connectivity: int = 8) -> LabeledObjects:
    """Label foreground components; labels follow raster-scan order of first pixel."""
    mask = np.asarray(mask)
    structure = EIGHT_CONN if connectivity == 8 else FOUR_CONN
    raw_labels, n = ndimage.label(mask > 0, structure=structure)
    label_map = _relabel_raster_order(raw_labels, n)
    return _describe(label_map, n)


def _relabel_raster_order(label_map: np.ndarray, n: int) -> np.ndarray:
    if n == 0:
        return label_map.astype(np.int32)
    flat = label_map.ravel()
    first_pos = np.full(n + 1, flat.size, dtype=np.int64)
    nonzero = np.flatnonzero(flat)
    # reversed so earlier positions overwrite later ones
    first_pos[flat[nonzero[::-1]]] = nonzero[::-1]
    order = np.argsort(first_pos[1:], kind="stable")  # old label - 1, by first pixel
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return remap[label_map]


def _describe(label_map: np.ndarray, n: int) -> LabeledObjects:
    label_map = label_map.astype(np.int32)
    if n == 0:
        return LabeledObjects(label_map=label_map, count=0)
    areas = np.bincount(label_map.ravel(), minlength=n + 1)[1:]
    centroids = ndimage.center_of_mass(np.ones_like(label_map), label_map, index=range(1, n + 1))
    diameters = np.sqrt(4.0 * areas / np.pi)
    return LabeledObjects(
        label_map=label_map,
        count=n,
        areas_px=[int(a) for a in areas],
        centroids=[(float(r), float(c)) for r, c in centroids],
        equivalent_diameters_px=[float(d) for d in diameters],
    )


def filter_small(objects: LabeledObjects, min_area_px: int = 20) -> LabeledObjects:
    """Drop components with area < min_area_px and relabel densely. Idempotent."""
    if min_area_px <= 0 or objects.count == 0:
        return objects
    keep = [k + 1 for k, area in enumerate(objects.areas_px) if area >= min_area_px]
    remap = np.zeros(objects.count + 1, dtype=np.int32)
    remap[keep] = np.arange(1, len(keep) + 1, dtype=np.int32)
    return _describe(remap[objects.label_map], len(keep))


def count_cells(logits: np.ndarray, cfg: PostprocConfig | None = None) -> LabeledObjects:
    """binarize -> connected components -> small-object filter."""
    cfg = cfg or PostprocConfig()
    mask = binarize(logits, cfg.threshold_prob)
    objects = connected_components(mask, cfg.connectivity)
    return filter_small(objects, cfg.min_area_px)


def count_mask(mask: np.ndarray, cfg: PostprocConfig | None = None) -> LabeledObjects:
    """Components + filter for an already-binary mask (ground truth path)."""
    cfg = cfg or PostprocConfig()
    objects = connected_components(mask, cfg.connectivity)
    return filter_small(objects, cfg.min_area_px)
