"""Soft Dice and Focal losses over per-pixel foreground probabilities.

Both losses take probabilities, not logits, so their values and gradients can
be checked directly against finite differences. Dice is computed over the
whole batch (one global overlap ratio, not a per-image average), which keeps
batches with empty masks stable. Focal uses a constant alpha weight on every
pixel, so with gamma=0 and alpha=1 it reduces exactly to mean binary
cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_CLIP = 1e-7


@dataclass
class LossConfig:
    kind: str = "dice"  # dice | focal
    dice_smooth: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.kind not in ("dice", "focal"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must be in (0, 1]")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dice_smooth": self.dice_smooth,
            "focal_alpha": self.focal_alpha,
            "focal_gamma": self.focal_gamma,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LossConfig":
        return cls(
            kind=raw.get("kind", "dice"),
            dice_smooth=raw.get("dice_smooth", 1.0),
            focal_alpha=raw.get("focal_alpha", 0.25),
            focal_gamma=raw.get("focal_gamma", 2.0),
        )

    def build(self):
        if self.kind == "dice":
            return lambda probs, target: dice_loss(probs, target, self.dice_smooth)
        return lambda probs, target: focal_loss(probs, target, self.focal_alpha, self.focal_gamma)


def _check_shapes(probs: torch.Tensor, target: torch.Tensor) -> None:
    if probs.shape != target.shape:
        raise ValueError(f"probs shape {tuple(probs.shape)} != target shape {tuple(target.shape)}")


def dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(p*g) + smooth) / (sum(p) + sum(g) + smooth), over the whole batch."""
    _check_shapes(probs, target)
    target = target.to(probs.dtype)
    intersection = (probs * target).sum()
    denom = probs.sum() + target.sum() + smooth
    return 1.0 - (2.0 * intersection + smooth) / denom


def focal_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Mean over pixels of -alpha * (1 - p_t)^gamma * log(p_t)."""
    _check_shapes(probs, target)
    target = target.to(probs.dtype)
    p = probs.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    p_t = torch.where(target > 0.5, p, 1.0 - p)
    return (-alpha * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def bce_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities; reference for focal(gamma=0, alpha=1)."""
    _check_shapes(probs, target)
    target = target.to(probs.dtype)
    p = probs.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()
