"""Grad-CAM heatmaps for the segmentation network.

Channel weights are the spatial mean of the target-scalar gradient at the
chosen layer; the map is the rectified weighted activation sum, upsampled to
input size and min-max normalized. The walk runs in double precision on a
cached copy of the network so maps are stable and invariant under positive
rescaling of the target.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import ResUNet

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.4
DEFAULT_COLORMAP = "jet"


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) float32 in [0, 1], input-sized
    target_layer: str
    target: str
    all_zero: bool = False


class GradCam:
    """Reusable Grad-CAM engine bound to one network."""

    def __init__(self, net: ResUNet):
        self.net = net
        self._net64 = copy.deepcopy(net).double().eval()
        self.layers = self._net64.activation_layers()

    def layer_names(self) -> list[str]:
        return list(self.layers)

    def compute(
        self,
        image: np.ndarray,
        target_layer: str | None = None,
        target: str | tuple[int, int] = "mean_foreground_logit",
        target_scale: float = 1.0,
    ) -> Heatmap:
        """Heatmap for one (H, W, 3) image in [0, 1].

        target is either "mean_foreground_logit" (mean logit over pixels the
        model predicts as foreground, falling back to the whole image when
        nothing is predicted) or a (row, col) pixel to attribute.
        """
        layer_name = target_layer or self._net64.default_cam_layer()
        if layer_name not in self.layers:
            raise ValueError(
                f"unknown layer {layer_name!r}; valid layers: {', '.join(self.layers)}"
            )
        module = self.layers[layer_name]

        captured: dict[str, torch.Tensor] = {}

        def fwd_hook(_mod, _inp, out):
            captured["activation"] = out
            out.retain_grad()

        handle = module.register_forward_hook(fwd_hook)
        try:
            x = (
                torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
                .double()
                .unsqueeze(0)
            )
            logits = self._net64(x)
            scalar = self._target_scalar(logits, target) * target_scale
            self._net64.zero_grad(set_to_none=True)
            scalar.backward()
        finally:
            handle.remove()

        activation = captured["activation"].detach()[0]  # (C, h, w)
        grad = captured["activation"].grad
        if grad is None:
            raise RuntimeError(f"no gradient reached layer {layer_name!r}")
        grad = grad.detach()[0]

        weights = grad.mean(dim=(1, 2))  # (C,)
        cam = F.relu((weights[:, None, None] * activation).sum(dim=0))
        cam = F.interpolate(
            cam[None, None], size=image.shape[:2], mode="bilinear", align_corners=False
        )[0, 0]
        peak = float(cam.max())
        all_zero = peak <= 0.0
        if all_zero:
            logger.warning("Grad-CAM map is identically zero for layer %s", layer_name)
            values = torch.zeros_like(cam)
        else:
            values = cam / peak
        return Heatmap(
            values=values.numpy().astype(np.float32),
            target_layer=layer_name,
            target=str(target),
            all_zero=all_zero,
        )

    @staticmethod
    def _target_scalar(logits: torch.Tensor, target) -> torch.Tensor:
        if target == "mean_foreground_logit":
            fg = torch.sigmoid(logits.detach()) > 0.5
            if fg.any():
                return logits[fg].mean()
            logger.warning("no predicted foreground; CAM target falls back to whole-image mean")
            return logits.mean()
        row, col = target
        return logits[0, 0, row, col]


def grad_cam(net: ResUNet, image, target_layer=None, target="mean_foreground_logit") -> Heatmap:
    return GradCam(net).compute(image, target_layer, target)


def colorize(heatmap_values: np.ndarray, colormap: str = DEFAULT_COLORMAP) -> np.ndarray:
    """Map [0, 1] heatmap values to uint8 RGB through a fixed colormap."""
    import matplotlib

    cmap = matplotlib.colormaps[colormap]
    rgba = cmap(np.clip(heatmap_values, 0.0, 1.0))
    return (rgba[:, :, :3] * 255.0 + 0.5).astype(np.uint8)


def overlay(
    image: np.ndarray,
    heatmap: Heatmap | np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    colormap: str = DEFAULT_COLORMAP,
) -> np.ndarray:
    """Alpha-blend the colorized heatmap onto the image; returns uint8 RGB.

    alpha 0 returns the original image bytes untouched; alpha 1 is the pure
    colormap render.
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if image.shape[:2] != values.shape[:2]:
        raise ValueError(f"image dims {image.shape[:2]} != heatmap dims {values.shape[:2]}")
    base = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if alpha == 0.0:
        return base
    colored = colorize(values, colormap)
    if alpha == 1.0:
        return colored
    blend = (1.0 - alpha) * base.astype(np.float64) + alpha * colored.astype(np.float64)
    return (blend + 0.5).astype(np.uint8)


def save_png(rgb: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(rgb).save(path)
