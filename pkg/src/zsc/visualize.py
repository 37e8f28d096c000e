"""Class heatmaps and density-map images."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .data import BoundingBox
from .embedding import EmbeddingNetwork, embed_patches


def _grid_boxes(h: int, w: int, side: int, stride: int) -> tuple[list[BoundingBox], int, int]:
    rows, cols = math.ceil(h / stride), math.ceil(w / stride)
    side_h, side_w = min(side, h), min(side, w)
    boxes = []
    for i in range(rows):
        for j in range(cols):
            cy, cx = i * stride + stride / 2, j * stride + stride / 2
            y1 = int(np.clip(round(cy - side_h / 2), 0, h - side_h))
            x1 = int(np.clip(round(cx - side_w / 2), 0, w - side_w))
            boxes.append(BoundingBox(x1, y1, x1 + side_w, y1 + side_h))
    return boxes, rows, cols


def class_heatmap(image: np.ndarray, exemplars: Sequence[BoundingBox], net: EmbeddingNetwork,
                  threshold: float = 0.5, stride: int = 8) -> np.ndarray:
    """Exemplar-vs-dense-patch correlation, min-max normalized and thresholded.

    Returns an (H, W) array in [0, 1] with cells below ``threshold`` set to 0.
    """
    if not exemplars:
        raise ValueError("need at least one exemplar")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    h, w = image.shape[:2]
    side = max(1, int(round(np.mean([(b.width + b.height) / 2 for b in exemplars]))))
    boxes, rows, cols = _grid_boxes(h, w, side, stride)
    query = embed_patches(net, image, list(exemplars)).mean(axis=0)
    corr = (embed_patches(net, image, boxes) @ query).reshape(rows, cols)
    lo, hi = corr.min(), corr.max()
    heat = (corr - lo) / (hi - lo) if hi > lo else np.ones_like(corr)
    heat = np.where(heat >= threshold, heat, 0.0)
    return np.kron(heat, np.ones((stride, stride)))[:h, :w]


def overlay(image: np.ndarray, heat: np.ndarray, cmap: str = "jet") -> np.ndarray:
    colored = colormaps[cmap](heat)[..., :3]
    alpha = np.where(heat > 0, 0.55, 0.0)[..., None]
    dimmed = np.where(heat[..., None] > 0, image, image * 0.35)
    return (1 - alpha) * dimmed + alpha * colored


def save_rgb(path: str | Path, rgb: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)
    return path


def emit_class_heatmap(image: np.ndarray, exemplars: Sequence[BoundingBox], net: EmbeddingNetwork,
                       threshold: float = 0.5, path: str | Path | None = None) -> np.ndarray:
    heat = class_heatmap(image, exemplars, net, threshold)
    if path is not None:
        save_rgb(path, overlay(image, heat))
    return heat


def save_density_png(path: str | Path, density: np.ndarray, cmap: str = "viridis") -> Path:
    peak = density.max()
    norm = density / peak if peak > 0 else density
    return save_rgb(path, colormaps[cmap](norm)[..., :3])
