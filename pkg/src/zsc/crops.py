"""Tensor conversion and crop-and-resize helpers shared by the networks."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import BoundingBox, DataError


def to_tensor(pixels: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) array -> (3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1))).to(dtype)


def crop_resize(image: torch.Tensor, boxes: Sequence[BoundingBox], size: int | tuple[int, int]
                ) -> torch.Tensor:
    """Crop each box from a (3, H, W) image and resize bilinearly to ``size``.

    Returns (len(boxes), 3, h, w).
    """
    if isinstance(size, int):
        size = (size, size)
    _, h, w = image.shape
    out = []
    for b in boxes:
        if not b.inside(h, w):
            raise DataError(f"box {b.as_list()} outside {w}x{h} image")
        crop = image[:, b.y1:b.y2, b.x1:b.x2][None]
        out.append(F.interpolate(crop, size=size, mode="bilinear", align_corners=False,
                                 antialias=True))
    if not out:
        return image.new_zeros((0, image.shape[0], *size))
    return torch.cat(out)
