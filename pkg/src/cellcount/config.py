"""Pipeline configuration: TOML file + dotted-path flag overrides.

Flags win over the file; the resolved document is hashed canonically so the
hash is stable under key reordering and every command can print it.
"""

from __future__ import annotations

import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .hashes import digest_json

DEFAULTS: dict = {
    "paths": {"data_root": "data", "run_store": "store", "artifacts": ""},
    "synth": {
        "image_size": [256, 256],
        "cell_count_mean": 8.0,
        "radius_range": [8.0, 25.0],
        "intensity_range": [0.4, 1.0],
        "background_noise_sigma": 0.03,
        "non_overlapping": False,
        "seed": 0,
    },
    "train": {
        "loss": {"kind": "dice", "dice_smooth": 1.0, "focal_alpha": 0.25, "focal_gamma": 2.0},
        "network": {
            "in_channels": 3,
            "base_width": 16,
            "depth": 4,
            "residual_blocks_per_scale": 2,
            "out_channels": 1,
        },
        "augment": {
            "crop_size": [512, 512],
            "max_rotation_deg": 30.0,
            "zoom_range": [1.0, 1.3],
            "brightness_delta": 0.2,
            "contrast_delta": 0.1,
            "enable_warp": False,
        },
        "postproc": {"threshold_prob": 0.5, "connectivity": 8, "min_area_px": 20},
        "batch_size": 8,
        "max_epochs": 400,
        "warmup_epochs_before_es": 100,
        "es_patience": 50,
        "es_min_delta": 1e-5,
        "lr": "auto",
        "seed": 0,
        "split_fraction": 0.75,
        "deterministic": False,
        "carbon_intensity": 0.27,
        "energy_probe": "auto",
    },
    "service": {"window_size": 100, "port": 8000},
    "registry": {"promotion_det_f1": 0.8},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, dotted: str) -> None:
    """Apply one 'a.b.c=value' override in place; values parse as JSON when possible."""
    if "=" not in dotted:
        raise ValueError(f"override must look like section.key=value, got {dotted!r}")
    path, _, raw_value = dotted.partition("=")
    keys = path.strip().split(".")
    node = config
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot override through non-table key {key!r} in {dotted!r}")
    node[keys[-1]] = _coerce(raw_value.strip())


def load_config(path: Path | None = None, overrides: tuple[str, ...] = ()) -> dict:
    config = json.loads(json.dumps(DEFAULTS))  # deep copy
    if path is not None:
        with open(path, "rb") as fh:
            config = _deep_merge(config, tomllib.load(fh))
    for dotted in overrides:
        apply_override(config, dotted)
    return config


def config_hash(config: dict) -> str:
    return digest_json(config)
