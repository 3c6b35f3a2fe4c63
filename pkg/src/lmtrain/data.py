"""Dataset handling: geometry normalization, splits, augmentation, synthetic scenes.

Real samples arrive as grayscale PNGs plus one-line JSON annotations listing
labelled points.  Everything downstream works on square float images in [0, 1],
so loading is a two-step pipeline: zero-pad to square, then resample to the
standard side length.  Point coordinates ride along through both steps.

The synthetic generator draws noisy ellipse scenes with analytically placed
landmarks, which gives a cheap corpus with exact ground truth.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image

from .morphology import PointLabel
from .rng import STREAM_SPLIT, STREAM_SYNTH, RngState

__all__ = [
    "LOCUS_NAMES",
    "DatasetManifest",
    "EllipseParams",
    "ProcessedSample",
    "Provenance",
    "RawSample",
    "generate_synthetic",
    "load_manifest",
    "load_sample",
    "pad_to_square",
    "preprocess_sample",
    "read_annotation",
    "read_png",
    "resize_to_standard",
    "rotate_augment",
    "save_dataset",
    "split",
    "write_annotation",
    "write_png",
]


class EllipseParams(NamedTuple):
    """Population parameters of one synthetic scene (row/col centre, semi-axes, tilt)."""

    row: float
    col: float
    a: float
    b: float
    angle: float


class Provenance(NamedTuple):
    """How a processed sample relates to its source image.

    ``pad_top``/``pad_left`` are the leading zero margins added before
    resampling, ``scale`` is standard_size / padded_side.  Together they let a
    prediction in standard coordinates be mapped back onto the original image.
    """

    pad_top: int
    pad_left: int
    source_height: int
    source_width: int
    scale: float


@dataclasses.dataclass
class RawSample:
    """A grayscale image as stored on disk plus its labelled points.

    ``ellipse`` is only set for synthetic samples and records the generating
    parameters; real data leaves it None.
    """

    image: np.ndarray
    points: list[PointLabel]
    mm_per_pixel: Optional[float]
    id: str
    ellipse: Optional[EllipseParams] = None


@dataclasses.dataclass
class ProcessedSample:
    """A model-ready sample: (1, S, S) float32 image in [0, 1] plus points in
    standard coordinates.  ``rotation_deg`` is nonzero only on augmented copies."""

    image: np.ndarray
    points: list[PointLabel]
    mm_per_pixel: Optional[float]
    id: str
    provenance: Provenance
    rotation_deg: float = 0.0


@dataclasses.dataclass(frozen=True)
class DatasetManifest:
    """Index of a dataset directory: (image, annotation) path pairs relative to
    ``root`` plus the label vocabulary."""

    root: str
    entries: tuple[tuple[str, str], ...]
    num_labels: int
    label_names: tuple[str, ...]


_DTYPE_MAX = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}


def pad_to_square(sample: RawSample) -> RawSample:
    """Zero-pad the shorter axis to make the image square.

    The deficit is split evenly, with the odd row or column going to the
    trailing edge.  Point coordinates shift by the leading margin.
    """
    h, w = sample.image.shape
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    if top == 0 and left == 0 and h == w:
        return dataclasses.replace(sample, points=list(sample.points))
    image = np.zeros((side, side), dtype=sample.image.dtype)
    image[top:top + h, left:left + w] = sample.image
    points = [PointLabel(p.label_id, p.row + top, p.col + left) for p in sample.points]
    return dataclasses.replace(sample, image=image, points=points)


def resize_to_standard(sample: RawSample, size: int) -> ProcessedSample:
    """Resample a square image to ``size`` x ``size`` and normalize to [0, 1].

    Intensities are divided by the bit-depth maximum of the input dtype.  Each
    point maps to round(coord * size / side), clamped to the frame.  The
    physical pixel pitch is rescaled by the inverse zoom factor.
    """
    if size < 1:
        raise ValueError(f"standard size must be positive, got {size}")
    h, w = sample.image.shape
    if h != w:
        raise ValueError(
            f"expected a square image, got {h}x{w}; run pad_to_square first"
        )
    try:
        max_value = _DTYPE_MAX[sample.image.dtype]
    except KeyError:
        raise ValueError(
            f"unsupported image dtype {sample.image.dtype}; expected uint8 or uint16"
        ) from None
    if h == size:
        resized = sample.image.astype(np.float32)
    else:
        pil = Image.fromarray(sample.image.astype(np.float32), mode="F")
        resized = np.asarray(pil.resize((size, size), Image.Resampling.BILINEAR))
    image = np.clip(resized / np.float32(max_value), 0.0, 1.0)[np.newaxis]

    points = []
    for p in sample.points:
        row = min(max(round(p.row * size / h), 0), size - 1)
        col = min(max(round(p.col * size / w), 0), size - 1)
        points.append(PointLabel(p.label_id, row, col))
    mm = None if sample.mm_per_pixel is None else sample.mm_per_pixel * h / size
    return ProcessedSample(
        image=image,
        points=points,
        mm_per_pixel=mm,
        id=sample.id,
        provenance=Provenance(0, 0, h, w, size / h),
    )


def preprocess_sample(sample: RawSample, size: int) -> ProcessedSample:
    """Pad to square then resize, recording the combined geometry in provenance."""
    h, w = sample.image.shape
    padded = pad_to_square(sample)
    out = resize_to_standard(padded, size)
    side = padded.image.shape[0]
    provenance = Provenance((side - h) // 2, (side - w) // 2, h, w, size / side)
    return dataclasses.replace(out, provenance=provenance)


def split(manifest: DatasetManifest, seed: RngState) -> tuple[list[int], list[int]]:
    """Deterministically partition sample indices into train and validation sets.

    The first floor(0.8 n) entries of a seeded permutation go to training.
    """
    n = len(manifest.entries)
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    order = seed.generator(STREAM_SPLIT).permutation(n).tolist()
    cut = (4 * n) // 5
    return order[:cut], order[cut:]


def rotate_augment(
    sample: ProcessedSample,
    rng: np.random.Generator,
    max_deg: float = 20.0,
    theta_deg: Optional[float] = None,
) -> ProcessedSample:
    """Rotate a sample about the image centre by a uniform random angle.

    Pixels are pulled from the source by inverse mapping with bilinear
    interpolation; anything sampled from outside the frame reads as zero.
    Points rotate with the image and are rounded back to pixel coordinates;
    a point that lands outside the frame is dropped from the sample, which
    downstream code treats as an absent landmark.  ``theta_deg`` forces a
    specific angle (used by tests); otherwise one is drawn from
    U(-max_deg, max_deg).
    """
    if max_deg < 0:
        raise ValueError(f"max_deg must be non-negative, got {max_deg}")
    _, side, side_w = sample.image.shape
    if side != side_w:
        raise ValueError(f"expected a square image, got {side}x{side_w}")
    theta = float(rng.uniform(-max_deg, max_deg)) if theta_deg is None else float(theta_deg)
    rad = math.radians(theta)
    cos, sin = math.cos(rad), math.sin(rad)
    c = (side - 1) / 2.0

    # Inverse map: for each output pixel, sample the source at R(-theta).
    grid = np.arange(side, dtype=np.float64) - c
    src_r = cos * grid[:, None] + sin * grid[None, :] + c
    src_c = -sin * grid[:, None] + cos * grid[None, :] + c
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    plane = sample.image[0].astype(np.float64)
    out = np.zeros((side, side), dtype=np.float64)
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side)
        out += weight * valid * plane[rr.clip(0, side - 1), cc.clip(0, side - 1)]

    points = []
    for p in sample.points:
        dr, dc = p.row - c, p.col - c
        row = round(cos * dr - sin * dc + c)
        col = round(sin * dr + cos * dc + c)
        if 0 <= row < side and 0 <= col < side:
            points.append(PointLabel(p.label_id, row, col))
    return dataclasses.replace(
        sample,
        image=out.astype(np.float32)[np.newaxis],
        points=points,
        rotation_deg=theta,
    )


LOCUS_NAMES = (
    "center",
    "leftmost",
    "rightmost",
    "topmost",
    "bottommost",
    "arc45",
    "arc135",
    "arc225",
)

# smoothstep band around the unit level set: fully bright inside, background
# outside. The band is wide and the noise heavy on purpose: pixel-level edge
# positions are ambiguous (per-pixel intensity step across the band is about
# 1.5 sigma of the noise), so exact landmark pixels cannot be read off local
# texture, while region-scale shape stays easy to learn.
_EDGE_IN, _EDGE_OUT = 0.70, 1.30
_BG, _FG_GAIN, _NOISE_STD = 30.0, 140.0, 18.0


def _support_point(center: np.ndarray, q: np.ndarray, direction: np.ndarray) -> np.ndarray:
    # boundary point maximizing <direction, x - c>: c + Q d / sqrt(d' Q d)
    qd = q @ direction
    return center + qd / math.sqrt(direction @ qd)


def generate_synthetic(count: int, size: int, num_labels: int, rng: RngState) -> list[RawSample]:
    """Draw ``count`` noisy ellipse scenes with analytically placed landmarks.

    Each scene is a bright tilted ellipse on a dark background with Gaussian
    pixel noise.  Landmark loci come in a fixed order (see ``LOCUS_NAMES``):
    the centre, the four axis-aligned extreme points of the boundary, then
    three fixed-parameter arc points.  ``num_labels`` selects a prefix of that
    list.  Geometry is sampled so all loci stay inside the frame.
    """
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    if size < 32:
        raise ValueError(f"size must be at least 32, got {size}")
    if not 1 <= num_labels <= len(LOCUS_NAMES):
        raise ValueError(
            f"num_labels must be in [1, {len(LOCUS_NAMES)}], got {num_labels}"
        )
    samples = []
    for i in range(count):
        g = rng.generator(STREAM_SYNTH, i)
        row = g.uniform(0.32 * size, 0.68 * size)
        col = g.uniform(0.32 * size, 0.68 * size)
        a = g.uniform(0.18 * size, 0.26 * size)
        b = g.uniform(0.10 * size, 0.16 * size)
        angle = g.uniform(0.0, math.pi)
        cos, sin = math.cos(angle), math.sin(angle)
        rot = np.array([[cos, -sin], [sin, cos]])
        q = rot @ np.diag([a * a, b * b]) @ rot.T
        center = np.array([row, col])

        # squared level-set value rho^2 = (x-c)' Q^-1 (x-c) on the pixel grid
        m = rot @ np.diag([a ** -2.0, b ** -2.0]) @ rot.T
        dr = np.arange(size)[:, None] - row
        dc = np.arange(size)[None, :] - col
        rho = np.sqrt(m[0, 0] * dr * dr + 2 * m[0, 1] * dr * dc + m[1, 1] * dc * dc)
        u = np.clip((_EDGE_OUT - rho) / (_EDGE_OUT - _EDGE_IN), 0.0, 1.0)
        shade = u * u * (3 - 2 * u)
        noisy = _BG + _FG_GAIN * shade + g.normal(0.0, _NOISE_STD, (size, size))
        image = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)

        loci = [center]
        for direction in ([0.0, -1.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]):
            loci.append(_support_point(center, q, np.array(direction)))
        for t in (math.pi / 4, 3 * math.pi / 4, 5 * math.pi / 4):
            loci.append(center + rot @ np.array([a * math.cos(t), b * math.sin(t)]))

        points = []
        for label, locus in enumerate(loci[:num_labels]):
            r, cpix = round(float(locus[0])), round(float(locus[1]))
            if not (0 <= r < size and 0 <= cpix < size):
                raise RuntimeError(f"synthetic locus {label} fell outside the frame")
            points.append(PointLabel(label, r, cpix))
        samples.append(
            RawSample(
                image=image,
                points=points,
                mm_per_pixel=0.5,
                id=f"synth{i:04d}",
                ellipse=EllipseParams(row, col, a, b, angle),
            )
        )
    return samples


def write_png(path, image: np.ndarray) -> None:
    """Write a 2-D uint8 or uint16 array as a grayscale PNG."""
    path = Path(path)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    if image.dtype == np.uint8 or image.dtype == np.uint16:
        Image.fromarray(image).save(path)
    else:
        raise ValueError(f"unsupported image dtype {image.dtype}; expected uint8 or uint16")


def read_png(path) -> np.ndarray:
    """Read a grayscale PNG back as uint8 or uint16."""
    with Image.open(Path(path)) as pil:
        mode = pil.mode
        arr = np.asarray(pil)
    if mode == "L":
        return arr.astype(np.uint8)
    if mode in ("I", "I;16"):
        return arr.astype(np.uint16)
    raise ValueError(f"unsupported PNG mode {mode!r}; expected 8- or 16-bit grayscale")


def write_annotation(path, sample_id: str, points, mm_per_pixel: Optional[float]) -> None:
    """Write one sample's labels as a single JSON line."""
    record = {
        "id": sample_id,
        "points": [[p.label_id, p.row, p.col] for p in points],
        "mm_per_pixel": mm_per_pixel,
    }
    Path(path).write_text(json.dumps(record) + "\n")


def read_annotation(path) -> tuple[str, list[PointLabel], Optional[float]]:
    """Read an annotation line back as (sample id, points, mm per pixel)."""
    record = json.loads(Path(path).read_text())
    try:
        points = [PointLabel(int(l), int(r), int(c)) for l, r, c in record["points"]]
        return str(record["id"]), points, record["mm_per_pixel"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed annotation file {path}: {exc}") from exc


def save_dataset(samples, out_dir, label_names) -> Path:
    """Write samples plus a manifest into ``out_dir``; returns the manifest path.

    Every sample's label ids must index into ``label_names``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    label_names = tuple(label_names)
    entries = []
    for sample in samples:
        for p in sample.points:
            if not 0 <= p.label_id < len(label_names):
                raise ValueError(
                    f"sample {sample.id!r} has label {p.label_id}, "
                    f"but only {len(label_names)} label names were given"
                )
        image_name = f"{sample.id}.png"
        ann_name = f"{sample.id}.json"
        write_png(out_dir / image_name, sample.image)
        write_annotation(out_dir / ann_name, sample.id, sample.points, sample.mm_per_pixel)
        entries.append((image_name, ann_name))

    lines = [f"num_labels {len(label_names)}", "label_names " + " ".join(label_names)]
    lines += [f"sample {img} {ann}" for img, ann in entries]
    manifest_path = out_dir / "manifest.txt"
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest file written by ``save_dataset``."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) < 3:
        raise ValueError(f"manifest {path} is incomplete")
    head, names_line = lines[0].split(), lines[1].split()
    if head[:1] != ["num_labels"] or len(head) != 2 or names_line[:1] != ["label_names"]:
        raise ValueError(f"manifest {path} has a malformed header")
    num_labels = int(head[1])
    label_names = tuple(names_line[1:])
    if len(label_names) != num_labels:
        raise ValueError(
            f"manifest {path} declares {num_labels} labels but names {len(label_names)}"
        )
    entries = []
    for ln in lines[2:]:
        parts = ln.split()
        if len(parts) != 3 or parts[0] != "sample":
            raise ValueError(f"manifest {path} has a malformed sample line: {ln!r}")
        entries.append((parts[1], parts[2]))
    return DatasetManifest(
        root=str(path.parent),
        entries=tuple(entries),
        num_labels=num_labels,
        label_names=label_names,
    )


def load_sample(manifest: DatasetManifest, index: int) -> RawSample:
    """Load one sample by manifest index, validating label ids against the manifest."""
    image_name, ann_name = manifest.entries[index]
    root = Path(manifest.root)
    image = read_png(root / image_name)
    sample_id, points, mm = read_annotation(root / ann_name)
    for p in points:
        if not 0 <= p.label_id < manifest.num_labels:
            raise ValueError(
                f"annotation {ann_name} uses label {p.label_id}, "
                f"but the manifest declares {manifest.num_labels} labels"
            )
    return RawSample(image=image, points=points, mm_per_pixel=mm, id=sample_id)
