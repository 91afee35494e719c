"""Image file I/O and preview grids.

Pixels live in [-1, 1] inside the package and as 8-bit RGB on disk,
mapped linearly: byte p corresponds to 2p/255 - 1, so 0 is -1 and 255
is +1, and a load/save round trip preserves bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image as PILImage

from .backend import DTYPE


def from_uint8(arr: np.ndarray, dtype=DTYPE) -> torch.Tensor:
    """(H, W, 3) uint8 -> (1, 3, H, W) float in [-1, 1]."""
    t = torch.from_numpy(arr.astype(np.float32)) * (2.0 / 255.0) - 1.0
    return t.permute(2, 0, 1).unsqueeze(0).to(dtype)


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    arr = img.detach().squeeze(0).permute(1, 2, 0).cpu().numpy()
    arr = (np.clip(arr, -1.0, 1.0) + 1.0) * (255.0 / 2.0)
    return np.rint(arr).astype(np.uint8)


def load_image(path) -> torch.Tensor:
    """Load an image file as a (1, 3, H, W) tensor in [-1, 1].

    Grayscale and palette images are expanded to three channels.
    """
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def save_image(img: torch.Tensor, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img)).save(path)


def compose_grid(rows: Sequence[Sequence[torch.Tensor]], pad: int = 2) -> torch.Tensor:
    """Lay out equally sized image tensors into one grid image.

    Cells are separated by ``pad`` pixels of white. All cells must share
    one size; rows may have different lengths (shorter rows are padded
    with blanks).
    """
    if not rows or not rows[0]:
        raise ValueError("grid needs at least one image")
    h, w = rows[0][0].shape[-2:]
    cols = max(len(r) for r in rows)
    grid_h = len(rows) * h + (len(rows) + 1) * pad
    grid_w = cols * w + (cols + 1) * pad
    canvas = torch.ones((1, 3, grid_h, grid_w), dtype=rows[0][0].dtype)
    for i, row in enumerate(rows):
        for j, cell in enumerate(row):
            if cell.shape[-2:] != (h, w):
                raise ValueError("all grid cells must share one size")
            top = pad + i * (h + pad)
            left = pad + j * (w + pad)
            canvas[..., top:top + h, left:left + w] = cell.detach()
    return canvas
