"""Point-label rasterization and iterated binary dilation/erosion.

Masks are 2D boolean numpy arrays. Dilation is clipped at the image rectangle;
erosion treats everything outside the rectangle as background, so shapes
touching the border erode faster than interior ones. Both are iterated
Minkowski operations under a fixed 3x3 structuring element.
"""

from __future__ import annotations

from enum import Enum
from typing import Iterable, NamedTuple

import numpy as np


class PointLabel(NamedTuple):
    """One landmark annotation: which label, and where."""

    label_id: int
    row: int
    col: int


class StructuringElement(Enum):
    """3x3 neighbourhood defining one morphology iteration."""

    SQUARE3 = "square3"  # 8-connected, full 3x3 block
    CROSS3 = "cross3"  # 4-connected, plus shape

    @property
    def offsets(self) -> tuple[tuple[int, int], ...]:
        if self is StructuringElement.SQUARE3:
            return tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))
        return ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


def rasterize(points: Iterable[PointLabel], label_id: int, height: int, width: int) -> np.ndarray:
    """Boolean (height, width) mask with one true bit per point of ``label_id``."""
    mask = np.zeros((height, width), dtype=bool)
    for point in points:
        if point.label_id != label_id:
            continue
        if not (0 <= point.row < height and 0 <= point.col < width):
            raise ValueError(
                f"point ({point.row}, {point.col}) of label {point.label_id} "
                f"is outside the {height}x{width} image"
            )
        mask[point.row, point.col] = True
    return mask


def _shifted(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Mask translated by (dy, dx), false-filled at the borders."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    ys = slice(max(0, dy), h + min(0, dy))
    xs = slice(max(0, dx), w + min(0, dx))
    ys_src = slice(max(0, -dy), h + min(0, -dy))
    xs_src = slice(max(0, -dx), w + min(0, -dx))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def _check_args(mask, iterations) -> np.ndarray:
    arr = np.asarray(mask, dtype=bool)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {arr.shape}")
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    return arr


def dilate(mask, iterations: int, se: StructuringElement = StructuringElement.SQUARE3) -> np.ndarray:
    """Iterated dilation, clipped to the image rectangle; 0 iterations is identity."""
    out = _check_args(mask, iterations)
    for _ in range(iterations):
        grown = out.copy()
        for dy, dx in se.offsets:
            if dy or dx:
                grown |= _shifted(out, dy, dx)
        out = grown
    return out


def erode(mask, iterations: int, se: StructuringElement = StructuringElement.SQUARE3) -> np.ndarray:
    """Iterated erosion with outside-the-image treated as background."""
    out = _check_args(mask, iterations)
    for _ in range(iterations):
        kept = out.copy()
        for dy, dx in se.offsets:
            if dy or dx:
                # out[q] requires mask[q + s] for every offset s; shifting by
                # -s aligns mask[q + s] onto position q
                kept &= _shifted(out, -dy, -dx)
        out = kept
    return out


def count_true(mask) -> int:
    """Population count of a boolean mask."""
    return int(np.count_nonzero(np.asarray(mask, dtype=bool)))
