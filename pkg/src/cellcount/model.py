"""Residual U-Net for pixel-wise binary segmentation.

Encoder/decoder blocks are pre-activation residual blocks (norm-act-conv
twice with an identity skip), skips joined by concatenation, 2x down/up
sampling per scale, and a 1x1 head emitting a one-channel logit map. Spatial
dims are preserved for inputs divisible by 2^depth; anything else is an
explicit shape error rather than silent padding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .hashes import digest_bytes, digest_json


class ArtifactError(RuntimeError):
    """Weight artifact failed to load or verify."""


@dataclass
class NetworkConfig:
    in_channels: int = 3
    base_width: int = 16
    depth: int = 4
    residual_blocks_per_scale: int = 2
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 4:
            raise ValueError(f"base_width must be >= 4, got {self.base_width}")
        if self.residual_blocks_per_scale < 1:
            raise ValueError("residual_blocks_per_scale must be >= 1")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_width": self.base_width,
            "depth": self.depth,
            "residual_blocks_per_scale": self.residual_blocks_per_scale,
            "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "NetworkConfig":
        return cls(**raw)

    @property
    def config_hash(self) -> str:
        return digest_json(self.to_dict())


class ResidualBlock(nn.Module):
    """Pre-activation residual block: (norm, act, conv) x2 + identity skip."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.act = nn.ReLU(inplace=True)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        out = self.conv1(self.act(self.norm1(x)))
        out = self.conv2(self.act(self.norm2(out)))
        return out + self.skip(x)


def _stage(in_ch: int, out_ch: int, blocks: int) -> nn.Sequential:
    mods = [ResidualBlock(in_ch, out_ch)]
    mods += [ResidualBlock(out_ch, out_ch) for _ in range(blocks - 1)]
    return nn.Sequential(*mods)


class ResUNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        w, d, b = config.base_width, config.depth, config.residual_blocks_per_scale
        widths = [w * (2**i) for i in range(d + 1)]  # per scale, last = bottleneck

        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)
        self.encoders = nn.ModuleList(
            _stage(widths[i], widths[i], b) for i in range(d)
        )
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(d)
        )
        self.bottleneck = _stage(widths[d], widths[d], b)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(d))
        )
        self.decoders = nn.ModuleList(
            _stage(2 * widths[i], widths[i], b) for i in reversed(range(d))
        )
        self.head = nn.Conv2d(widths[0], config.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d = self.config.depth
        h, w = x.shape[-2:]
        scale = 2**d
        if h % scale or w % scale:
            raise ValueError(
                f"input dims ({h}, {w}) must be divisible by 2^depth = {scale}"
            )
        x = self.stem(x)
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)

    def activation_layers(self) -> dict[str, nn.Module]:
        """Named spatial activations usable as Grad-CAM targets."""
        d = self.config.depth
        layers = {f"encoder{i + 1}": self.encoders[i] for i in range(d)}
        layers["bottleneck"] = self.bottleneck
        for i in range(d):
            layers[f"decoder{i + 1}"] = self.decoders[i]
        return layers

    def default_cam_layer(self) -> str:
        """Last decoder stage before the output head (full resolution)."""
        return f"decoder{self.config.depth}"

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build(config: NetworkConfig, seed: int = 0) -> ResUNet:
    """Construct and initialize; fixed (config, seed) gives fixed initial weights."""
    torch.manual_seed(seed)
    net = ResUNet(config)
    net.eval()
    return net


def weights_hash(net: nn.Module) -> str:
    return state_dict_hash(net.state_dict())


def state_dict_hash(state: dict) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tensor.dtype).encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


def save(net: ResUNet, path: Path, training_run_id: str = "", extra: dict | None = None) -> dict:
    """Write the weight blob plus a JSON sidecar with config and hashes.

    Returns the sidecar dict. ``extra`` carries artifact metadata such as the
    postprocessing config and drift reference histograms.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), path)
    sidecar = {
        "config": net.config.to_dict(),
        "config_hash": net.config.config_hash,
        "weights_hash": weights_hash(net),
        "training_run_id": training_run_id,
    }
    if extra:
        sidecar.update(extra)
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2))
    return sidecar


def sidecar_path(weights_path: Path) -> Path:
    return Path(weights_path).with_suffix(".json")


def load(path: Path) -> tuple[ResUNet, dict]:
    """Load a weight artifact, verifying config and weight hashes."""
    path = Path(path)
    meta_file = sidecar_path(path)
    if not meta_file.exists():
        raise ArtifactError(f"missing sidecar {meta_file}")
    sidecar = json.loads(meta_file.read_text())
    config = NetworkConfig.from_dict(sidecar["config"])
    if config.config_hash != sidecar["config_hash"]:
        raise ArtifactError(
            f"config hash mismatch in {meta_file}: sidecar config does not match its recorded hash"
        )
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ArtifactError(f"cannot read weight blob {path}: {exc}") from exc
    if state_dict_hash(state) != sidecar["weights_hash"]:
        raise ArtifactError(f"weight blob {path} does not match recorded weights_hash")
    net = ResUNet(config)
    net.load_state_dict(state)
    net.eval()
    return net, sidecar


def verify_artifact(path: Path) -> bool:
    """Hash-verify an artifact without building the network."""
    path = Path(path)
    sidecar = json.loads(sidecar_path(path).read_text())
    state = torch.load(path, map_location="cpu", weights_only=True)
    return state_dict_hash(state) == sidecar["weights_hash"]


def predict_logits(
    net: ResUNet,
    image: np.ndarray,
    tile: int = 512,
    overlap: int = 32,
) -> np.ndarray:
    """Full-resolution logit map for one (H, W, 3) image in [0, 1].

    Dims are reflect-padded up to the next multiple of 2^depth, and images
    larger than ``tile`` are processed as overlapping tiles stitched by
    center-crop priority, so arbitrary sizes run within bounded memory.
    """
    scale = 2**net.config.depth
    h, w = image.shape[:2]
    pad_h = (-h) % scale
    pad_w = (-w) % scale
    padded = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect") if pad_h or pad_w else image
    ph, pw = padded.shape[:2]

    net.eval()
    if max(ph, pw) <= tile:
        logits = _forward_np(net, padded)
    else:
        logits = _tiled_forward(net, padded, tile, overlap, scale)
    return logits[:h, :w]


def _forward_np(net: ResUNet, image: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().unsqueeze(0)
    with torch.no_grad():
        out = net(x)
    return out[0, 0].numpy()


def _tiled_forward(net, image, tile, overlap, scale) -> np.ndarray:
    h, w = image.shape[:2]
    out = np.zeros((h, w), dtype=np.float32)
    tile = min(tile, max(h, w))
    tile -= tile % scale
    step = tile - 2 * overlap
    if step <= 0:
        raise ValueError("tile must exceed twice the overlap")

    def starts(extent):
        if extent <= tile:
            return [0]
        pos = list(range(0, extent - tile, step))
        pos.append(extent - tile)
        return pos

    for top in starts(h):
        for left in starts(w):
            tl = _forward_np(net, image[top : top + tile, left : left + tile])
            # each tile contributes its center region; image borders keep the rim
            r0 = 0 if top == 0 else overlap
            r1 = tile if top + tile >= h else tile - overlap
            c0 = 0 if left == 0 else overlap
            c1 = tile if left + tile >= w else tile - overlap
            out[top + r0 : top + r1, left + c0 : left + c1] = tl[r0:r1, c0:c1]
    return out
