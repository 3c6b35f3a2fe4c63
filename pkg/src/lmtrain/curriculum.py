"""Dilate-then-erode label schedule and the matching loss re-weighting.

Training starts from point labels grown into regions and shrinks them back to
points over epochs. The positive-class weight of each label is rescaled so
that foreground cells keep the same total loss share as the regions shrink:

    w_adjusted = w * (pixels - covered) / covered

where ``covered`` counts the label's true bits (original points plus dilated
surround) and ``pixels`` is the full image area.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, NamedTuple

import numpy as np

from .morphology import PointLabel, StructuringElement, count_true, dilate, rasterize


@dataclass(frozen=True)
class CurriculumSchedule:
    """Dilation policy: start at ``initial_dilation`` iterations, drop by
    ``erosion_step`` every ``period`` epochs, clamp at zero."""

    initial_dilation: int = 65
    erosion_step: int = 10
    period: int = 50
    se: StructuringElement = StructuringElement.SQUARE3

    def __post_init__(self) -> None:
        if self.initial_dilation < 0:
            raise ValueError(f"initial_dilation must be >= 0, got {self.initial_dilation}")
        if self.erosion_step < 1:
            raise ValueError(f"erosion_step must be >= 1, got {self.erosion_step}")
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")


class CurriculumState(NamedTuple):
    """Snapshot of the curriculum at one epoch: the dilation level in effect
    and the per-label weights applied to the loss."""

    epoch: int
    level: int
    weights: np.ndarray


def dilation_level(schedule: CurriculumSchedule, epoch: int) -> int:
    """Dilation iterations in effect at ``epoch``; non-increasing, floored at 0."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return max(0, schedule.initial_dilation - schedule.erosion_step * (epoch // schedule.period))


def reweight(w: np.ndarray, total_pixels: int, dilated_pixels: np.ndarray, label_pixels: np.ndarray) -> np.ndarray:
    """Per-label weight w_k * (S - (D_k + L_k)) / (D_k + L_k) for image area S.

    Computed in exact rational arithmetic and rounded once, so the product
    of the result with (D_k + L_k) recovers w_k * (S - (D_k + L_k)) to within
    one ulp.
    """
    w = np.asarray(w, dtype=np.float64)
    dilated = np.asarray(dilated_pixels)
    labels = np.asarray(label_pixels)
    if not (w.shape == dilated.shape == labels.shape and w.ndim == 1):
        raise ValueError(
            f"w, dilated_pixels and label_pixels must be equal-length vectors, "
            f"got shapes {w.shape}, {dilated.shape}, {labels.shape}"
        )
    if total_pixels <= 0:
        raise ValueError(f"total_pixels must be positive, got {total_pixels}")
    if not (w > 0).all():
        raise ValueError("base weights must be strictly positive")
    out = np.empty_like(w)
    for k in range(w.size):
        covered = int(dilated[k]) + int(labels[k])
        if covered <= 0:
            raise ValueError(
                f"label {k} covers no pixels (absent label); exclude it from the "
                f"loss instead of re-weighting"
            )
        if covered > total_pixels:
            raise ValueError(
                f"label {k} covers {covered} pixels, more than the image's {total_pixels}"
            )
        out[k] = float(Fraction(w[k]) * (total_pixels - covered) / covered)
    return out


def make_targets(
    points: Iterable[PointLabel],
    level: int,
    height: int,
    width: int,
    se: StructuringElement,
    w: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-label dilated target masks plus their re-weighted loss weights.

    Returns ``(masks, weights)`` with ``masks`` boolean of shape (K, H, W) and
    ``weights`` float64 of shape (K,), K = len(w). Channel k is the rasterized
    points of label k dilated ``level`` times; labels are dilated independently
    and may overlap. A label with no points yields an all-false channel and
    weight 0.0; such channels carry no information and callers should exclude
    them from the loss rather than treat them as all-background.
    """
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    w = np.asarray(w, dtype=np.float64)
    k_count = w.size
    points = list(points)
    for point in points:
        if not 0 <= point.label_id < k_count:
            raise ValueError(
                f"point {tuple(point)} has label {point.label_id}, expected [0, {k_count})"
            )
    masks = np.zeros((k_count, height, width), dtype=bool)
    weights = np.zeros(k_count, dtype=np.float64)
    present = []
    dilated_px = []
    label_px = []
    for k in range(k_count):
        base = rasterize(points, k, height, width)
        base_count = count_true(base)
        if base_count == 0:
            continue
        masks[k] = dilate(base, level, se)
        present.append(k)
        label_px.append(base_count)
        dilated_px.append(count_true(masks[k]) - base_count)
    if present:
        weights[present] = reweight(
            w[present], height * width, np.array(dilated_px), np.array(label_px)
        )
    return masks, weights
