"""Cell counting in fluorescence microscopy.

Segmentation-based counting with a residual U-Net, two-loss training
ablation, three-tier evaluation, Grad-CAM heatmaps, energy accounting,
a local run store with a model registry, and a monitored HTTP service.
"""

__version__ = "0.1.0"
