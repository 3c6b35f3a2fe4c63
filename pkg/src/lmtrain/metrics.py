"""Landmark extraction from logit maps and pixel-distance evaluation stats.

The predicted landmark of a channel is its maximal-logit pixel (ties broken
toward the smallest row-major index). Reports aggregate Euclidean pixel
distances into a pooled RMSE, per-label RMSEs, and the success detection rate
(SDR): the percentage of distances strictly below a threshold.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .morphology import PointLabel

SDR_THRESHOLDS = (2.0, 2.5, 3.0, 4.0)


class PredictedLandmark(NamedTuple):
    label_id: int
    row: int
    col: int
    peak_logit: float


class EvalEntry(NamedTuple):
    """Distance of one (sample, label) pair; None when the ground truth
    landmark is absent and the pair was skipped."""

    sample_id: str
    label_id: int
    distance: Optional[float]


def extract_landmark(channel: np.ndarray, label_id: int = 0) -> PredictedLandmark:
    """Most probable pixel of one (H, W) logit channel."""
    arr = np.asarray(channel)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D channel, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("logits contain non-finite values")
    flat_index = int(arr.argmax())  # argmax returns the first maximum in row-major order
    row, col = divmod(flat_index, arr.shape[1])
    return PredictedLandmark(label_id, row, col, float(arr[row, col]))


def distance(pred: PredictedLandmark, truth: PointLabel) -> float:
    """Euclidean pixel distance between prediction and ground truth."""
    if pred.label_id != truth.label_id:
        raise ValueError(f"label mismatch: prediction {pred.label_id} vs truth {truth.label_id}")
    return math.hypot(pred.row - truth.row, pred.col - truth.col)


def rmse(distances: Sequence[float]) -> float:
    """Root of the mean squared distance."""
    if len(distances) == 0:
        raise ValueError("rmse of an empty distance list is undefined")
    arr = np.asarray(distances, dtype=np.float64)
    return float(np.sqrt(np.mean(arr * arr)))


def sdr(distances: Sequence[float], threshold: float) -> float:
    """Percentage of distances strictly below ``threshold``."""
    if len(distances) == 0:
        raise ValueError("sdr of an empty distance list is undefined")
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    arr = np.asarray(distances, dtype=np.float64)
    return float(100.0 * np.count_nonzero(arr < threshold) / arr.size)


def mm_rmse(distances_px: Sequence[float], mm_per_pixel: float) -> float:
    """Pixel RMSE converted to millimetres."""
    if mm_per_pixel <= 0:
        raise ValueError(f"mm_per_pixel must be positive, got {mm_per_pixel}")
    return rmse(distances_px) * mm_per_pixel


@dataclass(frozen=True)
class EvalReport:
    entries: tuple
    mean_rmse: float
    per_label_rmse: dict
    sdr: dict
    skipped: int
    mean_rmse_mm: Optional[float] = None
    per_label_rmse_mm: Optional[dict] = field(default=None)


def build_report(entries: Sequence[EvalEntry], mm_per_pixel: Optional[float] = None) -> EvalReport:
    """Aggregate per-(sample, label) distances into the summary statistics.

    Entries with distance None are counted as skipped and excluded from every
    aggregate. Pooled statistics treat all remaining (sample, label) pairs as
    one flat distance list.
    """
    entries = tuple(entries)
    pooled = [e.distance for e in entries if e.distance is not None]
    skipped = len(entries) - len(pooled)
    if not pooled:
        raise ValueError("no measurable (sample, label) pairs; every entry was skipped")
    labels = sorted({e.label_id for e in entries})
    per_label = {}
    for k in labels:
        ds = [e.distance for e in entries if e.label_id == k and e.distance is not None]
        if ds:
            per_label[k] = rmse(ds)
    mean = rmse(pooled)
    table = {t: sdr(pooled, t) for t in SDR_THRESHOLDS}
    mean_mm = None
    per_label_mm = None
    if mm_per_pixel is not None:
        if mm_per_pixel <= 0:
            raise ValueError(f"mm_per_pixel must be positive, got {mm_per_pixel}")
        mean_mm = mean * mm_per_pixel
        per_label_mm = {k: v * mm_per_pixel for k, v in per_label.items()}
    return EvalReport(
        entries=entries,
        mean_rmse=mean,
        per_label_rmse=per_label,
        sdr=table,
        skipped=skipped,
        mean_rmse_mm=mean_mm,
        per_label_rmse_mm=per_label_mm,
    )


def write_report_csv(report: EvalReport, path) -> None:
    """Serialize a report: one row per (sample, label), then per-label RMSE
    rows, then a summary row matching the usual results-table layout."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "label", "distance_px"])
        for entry in report.entries:
            writer.writerow([
                entry.sample_id,
                entry.label_id,
                "" if entry.distance is None else repr(float(entry.distance)),
            ])
        writer.writerow([])
        if report.per_label_rmse_mm is not None:
            writer.writerow(["label", "rmse_px", "rmse_mm"])
            for k, v in report.per_label_rmse.items():
                writer.writerow([k, repr(v), repr(report.per_label_rmse_mm[k])])
        else:
            writer.writerow(["label", "rmse_px"])
            for k, v in report.per_label_rmse.items():
                writer.writerow([k, repr(v)])
        writer.writerow([])
        header = ["Mean RMSE", "SDR<2", "SDR<2.5", "SDR<3", "SDR<4", "skipped"]
        row = [repr(report.mean_rmse)] + [repr(report.sdr[t]) for t in SDR_THRESHOLDS] + [report.skipped]
        if report.mean_rmse_mm is not None:
            header.append("Mean RMSE (mm)")
            row.append(repr(report.mean_rmse_mm))
        writer.writerow(header)
        writer.writerow(row)
