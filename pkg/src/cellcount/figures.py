"""Matplotlib renderings written next to the delimited outputs.

Every report-producing command emits PNG figures alongside its CSV/JSON:
loss curves per run, the ablation summary, evaluation scatter, emission
bars, and the side-by-side heatmap strip.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, out_png: Path) -> Path:
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def loss_curves(epoch_series: list[dict], out_png, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [e["epoch"] for e in epoch_series]
    ax.plot(epochs, [e["train_loss"] for e in epoch_series], label="train loss")
    ax.plot(epochs, [e["val_loss"] for e in epoch_series], label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend()
    return _finish(fig, out_png)


def ablation_summary(summary_rows: list[dict], out_png) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    losses = [row["loss"] for row in summary_rows]
    x = np.arange(len(losses))
    for offset, key, label in ((-0.2, "seg_f1", "segmentation F1"), (0.2, "det_f1", "detection F1")):
        means = [row.get(f"{key}_mean") or 0.0 for row in summary_rows]
        stds = [row.get(f"{key}_std") or 0.0 for row in summary_rows]
        axes[0].bar(x + offset, means, width=0.35, yerr=stds, capsize=4, label=label)
    axes[0].set_xticks(x, losses)
    axes[0].set_ylim(0, 1.05)
    axes[0].set_ylabel("F1")
    axes[0].legend()

    co2 = [row.get("co2_kg_mean") or 0.0 for row in summary_rows]
    axes[1].bar(x, co2, width=0.5, color="seagreen")
    axes[1].set_xticks(x, losses)
    axes[1].set_ylabel("mean CO2 (kg)")
    return _finish(fig, out_png)


def eval_scatter(per_image: list[dict], out_png) -> Path:
    rows = [r for r in per_image if "error" not in r]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    true = [r["true_count"] for r in rows]
    pred = [r["pred_count"] for r in rows]
    lim = max(true + pred + [1]) * 1.1
    axes[0].scatter(true, pred, s=18, alpha=0.7)
    axes[0].plot([0, lim], [0, lim], "k--", linewidth=1)
    axes[0].set_xlabel("true count")
    axes[0].set_ylabel("predicted count")
    axes[0].set_xlim(0, lim)
    axes[0].set_ylim(0, lim)

    axes[1].hist([r["det_f1"] for r in rows], bins=np.linspace(0, 1, 21), color="steelblue")
    axes[1].set_xlabel("per-image detection F1")
    axes[1].set_ylabel("images")
    return _finish(fig, out_png)


def emissions_bars(df, out_png) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(df))
    ax.bar(x - 0.2, df["cpu_kwh"], width=0.4, label="CPU kWh")
    ax.bar(x + 0.2, df["gpu_kwh"], width=0.4, label="GPU kWh")
    ax.set_xticks(x, df["label"])
    ax.set_ylabel("energy (kWh)")
    ax2 = ax.twinx()
    ax2.plot(x, df["co2_kg"], "ro-", label="CO2 (kg)")
    ax2.set_ylabel("CO2 (kg)")
    ax.legend(loc="upper left")
    return _finish(fig, out_png)


def cam_strip(panels: list[tuple[str, np.ndarray]], out_png) -> Path:
    """Side-by-side uint8 RGB panels, e.g. original plus one heatmap per model."""
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4))
    if len(panels) == 1:
        axes = [axes]
    for ax, (title, rgb) in zip(axes, panels):
        ax.imshow(rgb)
        ax.set_title(title)
        ax.axis("off")
    return _finish(fig, out_png)
