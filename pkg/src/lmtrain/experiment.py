"""Run orchestration: experiment config, the training loop, evaluation, overlays.

A run is fully described by an :class:`ExperimentConfig` (diffable INI file,
every key mirrored by a CLI flag, flag wins) and owns its output directory:

    out/
      config.ini            effective config, written before training starts
      dataset/              materialized synthetic data (synthetic runs only)
      checkpoints/
        level{L}.lckp       model weights after the last epoch at level L
        final.lckp          model weights at the end of training
        last.lckp           weights + Adam moments, rewritten every epoch
      run_state.json        epoch/step counters matching last.lckp
      record.csv            per-epoch loss, level, canonical weights, wall time
      eval.csv              validation report (see metrics.write_report_csv)

Error taxonomy, mirrored to process exit codes by the CLI: ConfigError for
invalid or inconsistent settings, DataError for missing or malformed files,
NumericError when the loss stops being finite.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .curriculum import CurriculumSchedule, dilation_level, make_targets, reweight
from .data import (
    LOCUS_NAMES,
    DatasetManifest,
    ProcessedSample,
    generate_synthetic,
    load_manifest,
    load_sample,
    preprocess_sample,
    rotate_augment,
    save_dataset,
    split,
)
from .metrics import EvalEntry, EvalReport, build_report, distance, extract_landmark, write_report_csv
from .morphology import StructuringElement, count_true, dilate
from .optim import Adam
from .rng import STREAM_AUGMENT, STREAM_SHUFFLE, RngState
from .tensor import Tensor, weighted_bce_with_logits
from .unet import UNet, UNetConfig


class ConfigError(Exception):
    """Invalid or inconsistent experiment settings."""


class DataError(Exception):
    """Missing or malformed dataset, checkpoint, or output location."""


class NumericError(Exception):
    """Training produced a non-finite loss."""


_SE_NAMES = {"square3": StructuringElement.SQUARE3, "cross3": StructuringElement.CROSS3}


@dataclasses.dataclass
class ExperimentConfig:
    """Everything a run needs; defaults follow the reference schedule.

    Exactly one of ``manifest`` and ``synthetic_count`` selects the dataset.
    ``epochs`` defaults to 400: one full pass of the default 65/10/50 schedule
    plus 50 epochs at level 0. Batch size 8 is likewise an artifact default,
    not a tuned value.

    ``dilate = 0`` selects the baseline arm: point targets with unit weights
    for the whole run, i.e. plain pixel-wise BCE with neither label growth
    nor loss re-weighting. Any positive ``dilate`` trains the curriculum,
    which keeps the dynamic re-weighting active at every level - including
    the final level 0, where the single positive pixel carries weight S-1.
    """

    manifest: Optional[str] = None
    synthetic_count: Optional[int] = None
    num_labels: Optional[int] = None
    size: int = 512
    depth: int = 3
    base_channels: int = 8
    dilate: int = 65
    erode_step: int = 10
    period: int = 50
    se: str = "square3"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 400
    rotation_aug: bool = False
    max_deg: float = 20.0
    seed: int = 0
    out_dir: str = "run"

    def validate(self, require_dataset: bool = True) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.max_deg < 0:
            raise ConfigError(f"max_deg must be non-negative, got {self.max_deg}")
        if self.se not in _SE_NAMES:
            raise ConfigError(f"se must be one of {sorted(_SE_NAMES)}, got {self.se!r}")
        if self.size < 8:
            raise ConfigError(f"size must be at least 8, got {self.size}")
        divisor = 2**self.depth
        if self.size % divisor:
            raise ConfigError(
                f"size {self.size} is not divisible by 2^depth = {divisor}; "
                f"pick a multiple of {divisor} or lower model.depth"
            )
        try:
            self.schedule()
            UNetConfig(1, self.num_labels or 1, self.depth, self.base_channels)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if require_dataset:
            if (self.manifest is None) == (self.synthetic_count is None):
                raise ConfigError(
                    "exactly one dataset source is required: set dataset.manifest "
                    "or dataset.synthetic_count (flags --data / --synthetic)"
                )
            if self.synthetic_count is not None and self.num_labels is None:
                raise ConfigError(
                    "synthetic datasets need dataset.num_labels (flag --labels)"
                )

    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.dilate, self.erode_step, self.period, _SE_NAMES[self.se])

    def model_config(self, num_labels: int) -> UNetConfig:
        return UNetConfig(
            in_channels=1, num_labels=num_labels, depth=self.depth, base_channels=self.base_channels
        )


# (section, key) -> (attribute, parser); the whole config surface
_SCHEMA = {
    ("dataset", "manifest"): ("manifest", str),
    ("dataset", "synthetic_count"): ("synthetic_count", int),
    ("dataset", "num_labels"): ("num_labels", int),
    ("dataset", "size"): ("size", int),
    ("model", "depth"): ("depth", int),
    ("model", "base_channels"): ("base_channels", int),
    ("schedule", "dilate"): ("dilate", int),
    ("schedule", "erode_step"): ("erode_step", int),
    ("schedule", "period"): ("period", int),
    ("schedule", "se"): ("se", str),
    ("optimizer", "lr"): ("lr", float),
    ("optimizer", "beta1"): ("beta1", float),
    ("optimizer", "beta2"): ("beta2", float),
    ("optimizer", "batch_size"): ("batch_size", int),
    ("optimizer", "epochs"): ("epochs", int),
    ("augmentation", "rotation"): ("rotation_aug", "bool"),
    ("augmentation", "max_deg"): ("max_deg", float),
    ("run", "seed"): ("seed", int),
    ("run", "out"): ("out_dir", str),
}

_BOOL_WORDS = {"1": True, "true": True, "yes": True, "on": True,
               "0": False, "false": False, "no": False, "off": False}


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> ExperimentConfig:
    """Build a config from an optional INI file plus flag overrides (flag wins).

    ``overrides`` maps attribute names (e.g. ``"epochs"``) to already-typed
    values; None entries are ignored.
    """
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                if (section, key) not in _SCHEMA:
                    raise ConfigError(f"unknown config key [{section}] {key} in {path}")
                attr, kind = _SCHEMA[(section, key)]
                try:
                    if kind == "bool":
                        values[attr] = _BOOL_WORDS[raw.strip().lower()]
                    else:
                        values[attr] = kind(raw)
                except (ValueError, KeyError):
                    raise ConfigError(
                        f"bad value for [{section}] {key} in {path}: {raw!r}"
                    ) from None
    for attr, value in (overrides or {}).items():
        if value is not None:
            values[attr] = value
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_ini(config: ExperimentConfig) -> str:
    """Render the effective config as the INI text ``load_config`` accepts."""
    by_section: dict[str, list[tuple[str, str]]] = {}
    for (section, key), (attr, kind) in _SCHEMA.items():
        value = getattr(config, attr)
        if value is None:
            continue
        text = ("true" if value else "false") if kind == "bool" else str(value)
        by_section.setdefault(section, []).append((key, text))
    lines = []
    for section in ("dataset", "model", "schedule", "optimizer", "augmentation", "run"):
        lines.append(f"[{section}]")
        lines += [f"{key} = {text}" for key, text in by_section.get(section, [])]
        lines.append("")
    return "\n".join(lines)


class EpochRow(NamedTuple):
    epoch: int
    level: int
    loss: float
    weights: tuple
    seconds: float


@dataclasses.dataclass
class RunRecord:
    """What a training run produced: the per-epoch trace, the validation
    report, and where the checkpoints went."""

    rows: list[EpochRow]
    report: EvalReport
    checkpoint_paths: list[str]
    out_dir: str


def _materialize_dataset(config: ExperimentConfig, rng: RngState) -> DatasetManifest:
    if config.synthetic_count is not None:
        try:
            samples = generate_synthetic(
                config.synthetic_count, config.size, config.num_labels, rng
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        try:
            manifest_path = save_dataset(
                samples, Path(config.out_dir) / "dataset", LOCUS_NAMES[: config.num_labels]
            )
        except OSError as exc:
            raise DataError(f"cannot write dataset under {config.out_dir}: {exc}") from exc
        return load_manifest(manifest_path)
    return _load_manifest(config.manifest)


def _load_manifest(path) -> DatasetManifest:
    try:
        return load_manifest(path)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _load_processed(manifest: DatasetManifest, size: int) -> list[ProcessedSample]:
    out = []
    for i in range(len(manifest.entries)):
        try:
            out.append(preprocess_sample(load_sample(manifest, i), size))
        except FileNotFoundError as exc:
            raise DataError(f"dataset file missing: {exc}") from None
        except ValueError as exc:
            raise DataError(f"bad sample {manifest.entries[i][0]}: {exc}") from exc
    return out


def _common_mm(samples) -> Optional[float]:
    mms = {s.mm_per_pixel for s in samples}
    if len(mms) == 1:
        return mms.pop()
    return None  # mixed resolutions: report in pixels only


def _canonical_weights(level: int, se: StructuringElement, size: int, k: int) -> tuple:
    """The schedule's nominal weight vector: the reweight rule applied to one
    interior point at this level (border clipping ignored)."""
    point = np.zeros((size, size), dtype=bool)
    point[size // 2, size // 2] = True
    covered = count_true(dilate(point, level, se))
    if covered >= size * size:
        return (0.0,) * k
    wt = reweight(np.ones(k), size * size, np.full(k, covered - 1), np.ones(k, dtype=int))
    return tuple(float(v) for v in wt)


def _forward_loss(model: UNet, images: np.ndarray, masks: np.ndarray, weights: np.ndarray, epoch: int):
    x = Tensor(images)
    logits = model(x)
    try:
        return weighted_bce_with_logits(
            logits, masks, weights, channel_mask=weights > 0
        )
    except ValueError as exc:
        if "non-finite" in str(exc):
            raise NumericError(f"non-finite logits at epoch {epoch}") from exc
        if "excludes every channel" in str(exc):
            raise DataError(
                f"every landmark absent across one batch at epoch {epoch}; "
                f"check the annotations"
            ) from exc
        raise


def run_training(config: ExperimentConfig, log=print) -> RunRecord:
    """Execute one training run end to end and write all artifacts.

    Per epoch: look up the dilation level, build (or reuse) dilated target
    masks and their weights, iterate shuffled batches of weighted BCE +
    Adam steps. Checkpoints are written at every level change (the
    curriculum's semantic boundaries), plus a resumable ``last.lckp`` with
    optimizer moments every epoch and ``final.lckp`` at the end. Finishes by
    evaluating the validation split and writing ``eval.csv``.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.ini").write_text(config_to_ini(config))
    except OSError as exc:
        raise DataError(f"cannot write to output directory {out_dir}: {exc}") from exc

    rng = RngState(config.seed)
    manifest = _materialize_dataset(config, rng)
    k = manifest.num_labels
    if config.num_labels is not None and config.num_labels != k:
        raise ConfigError(
            f"config says {config.num_labels} labels but the manifest declares {k}"
        )
    samples = _load_processed(manifest, config.size)
    try:
        train_idx, val_idx = split(manifest, rng)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    train_samples = [samples[i] for i in train_idx]
    val_samples = [samples[i] for i in val_idx]

    model = UNet(config.model_config(k), rng)
    opt = Adam(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    schedule = config.schedule()
    baseline = config.dilate == 0
    size = config.size
    n_train = len(train_samples)

    base_images = np.stack([s.image for s in train_samples])
    targets_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    weight_trace: dict[int, tuple] = {}

    def targets_for(points_per_sample, level):
        masks = np.zeros((len(points_per_sample), k, size, size), dtype=bool)
        weights = np.zeros((len(points_per_sample), k), dtype=np.float64)
        for i, points in enumerate(points_per_sample):
            masks[i], weights[i] = targets_one(points, level)
        return masks, weights

    def targets_one(points, level):
        try:
            masks, weights = make_targets(points, level, size, size, schedule.se, np.ones(k))
        except ValueError as exc:
            raise DataError(f"cannot build targets: {exc}") from exc
        if baseline:
            # baseline arm: unweighted BCE; keep only the absent-label zeros
            weights = (weights > 0).astype(np.float64)
        return masks, weights

    rows: list[EpochRow] = []
    checkpoint_paths: list[str] = []
    for epoch in range(config.epochs):
        started = time.perf_counter()
        level = dilation_level(schedule, epoch)
        if level not in weight_trace:
            weight_trace[level] = (
                (1.0,) * k if baseline else _canonical_weights(level, schedule.se, size, k)
            )

        if config.rotation_aug:
            augmented = [
                rotate_augment(s, rng.generator(STREAM_AUGMENT, epoch, i), config.max_deg)
                for i, s in enumerate(train_samples)
            ]
            images = np.stack([s.image for s in augmented])
            masks, weights = targets_for([s.points for s in augmented], level)
        else:
            images = base_images
            if level not in targets_cache:
                targets_cache[level] = targets_for([s.points for s in train_samples], level)
            masks, weights = targets_cache[level]

        order = rng.generator(STREAM_SHUFFLE, epoch).permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, config.batch_size):
            sel = order[start : start + config.batch_size]
            loss = _forward_loss(model, images[sel], masks[sel], weights[sel], epoch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            loss_sum += value * len(sel)
        epoch_loss = loss_sum / n_train

        seconds = time.perf_counter() - started
        rows.append(EpochRow(epoch, level, epoch_loss, weight_trace[level], seconds))
        log(
            f"epoch {epoch + 1}/{config.epochs} level {level} "
            f"loss {epoch_loss:.6f} ({seconds:.1f}s)"
        )

        last_of_level = epoch + 1 == config.epochs or dilation_level(schedule, epoch + 1) != level
        if last_of_level:
            path = ckpt_dir / f"level{level}.lckp"
            write_checkpoint(path, model.state_tensors())
            checkpoint_paths.append(str(path))
        resumable = dict(model.state_tensors())
        resumable.update(opt.state_tensors())
        write_checkpoint(ckpt_dir / "last.lckp", resumable)
        (out_dir / "run_state.json").write_text(
            json.dumps({"epochs_done": epoch + 1, "adam_steps": opt.t, "level": level}) + "\n"
        )

    final_path = ckpt_dir / "final.lckp"
    write_checkpoint(final_path, model.state_tensors())
    checkpoint_paths.append(str(final_path))

    report = evaluate_model(model, val_samples)
    write_report_csv(report, out_dir / "eval.csv")
    _write_record_csv(rows, k, out_dir / "record.csv")
    return RunRecord(rows, report, checkpoint_paths, str(out_dir))


def _write_record_csv(rows: list[EpochRow], k: int, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "level", "loss", "seconds"] + [f"w{i}" for i in range(k)])
        for row in rows:
            writer.writerow(
                [row.epoch, row.level, repr(row.loss), f"{row.seconds:.3f}"]
                + [repr(v) for v in row.weights]
            )


def predict_landmarks(model: UNet, samples, batch_size: int = 8):
    """Forward each sample and decode one argmax landmark per label channel."""
    k = model.config.num_labels
    preds = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        logits = model(Tensor(np.stack([s.image for s in batch]))).data
        for i in range(len(batch)):
            preds.append([extract_landmark(logits[i, c], c) for c in range(k)])
    return preds


def evaluate_model(model: UNet, samples, batch_size: int = 8) -> EvalReport:
    """Pixel-distance report over ``samples``; absent labels become skipped entries."""
    if not samples:
        raise DataError("evaluation set is empty")
    k = model.config.num_labels
    preds = predict_landmarks(model, samples, batch_size)
    entries = []
    for sample, sample_preds in zip(samples, preds):
        truth = {p.label_id: p for p in sample.points}
        for c in range(k):
            if c in truth:
                entries.append(EvalEntry(sample.id, c, distance(sample_preds[c], truth[c])))
            else:
                entries.append(EvalEntry(sample.id, c, None))
    try:
        return build_report(entries, mm_per_pixel=_common_mm(samples))
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _load_model_for(config: ExperimentConfig, num_labels: int, checkpoint_path) -> UNet:
    try:
        tensors = read_checkpoint(checkpoint_path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {checkpoint_path}") from None
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc
    model = UNet(config.model_config(num_labels), RngState(config.seed))
    try:
        model.load_state(tensors)
    except (KeyError, ValueError) as exc:
        raise ConfigError(
            f"checkpoint {checkpoint_path} does not fit the configured model "
            f"(labels={num_labels}, depth={config.depth}, "
            f"base_channels={config.base_channels}): {exc}"
        ) from exc
    return model


def run_eval(config: ExperimentConfig, checkpoint_path, manifest_path, csv_path) -> EvalReport:
    """Evaluate a checkpoint over every sample of a manifest; writes ``csv_path``."""
    config.validate(require_dataset=False)
    manifest = _load_manifest(manifest_path)
    samples = _load_processed(manifest, config.size)
    model = _load_model_for(config, manifest.num_labels, checkpoint_path)
    report = evaluate_model(model, samples, config.batch_size)
    try:
        write_report_csv(report, csv_path)
    except OSError as exc:
        raise DataError(f"cannot write report to {csv_path}: {exc}") from exc
    return report


def run_generate(count: int, size: int, num_labels: int, seed: int, out_dir) -> Path:
    """Materialize a synthetic dataset; returns the manifest path."""
    try:
        samples = generate_synthetic(count, size, num_labels, RngState(seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        return save_dataset(samples, out_dir, LOCUS_NAMES[:num_labels])
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out_dir}: {exc}") from exc


# overlay marker geometry: plus-shaped crosses with this arm length, 1 px wide
CROSS_ARM = 3
TRUTH_COLOR = (0, 0, 255)
PRED_COLOR = (255, 0, 0)


def _draw_cross(canvas: np.ndarray, row: int, col: int, color) -> None:
    h, w = canvas.shape[:2]
    for d in range(-CROSS_ARM, CROSS_ARM + 1):
        if 0 <= row + d < h and 0 <= col < w:
            canvas[row + d, col] = color
        if 0 <= row < h and 0 <= col + d < w:
            canvas[row, col + d] = color


def render_overlay(image01: np.ndarray, truth_points, predicted) -> np.ndarray:
    """Grayscale base with blue ground-truth crosses under red predicted crosses.

    Truth is drawn first, predictions second, so where they overlap the red
    marker wins; identical pixels mean the prediction is exact.
    """
    gray = np.clip(np.rint(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)
    canvas = np.stack([gray, gray, gray], axis=-1)
    for p in truth_points:
        _draw_cross(canvas, p.row, p.col, TRUTH_COLOR)
    for p in predicted:
        _draw_cross(canvas, p.row, p.col, PRED_COLOR)
    return canvas


def run_render(
    config: ExperimentConfig, checkpoint_path, manifest_path, sample_index: int, out_path, log=None
) -> Path:
    """Write a Figure-style overlay PNG for one sample of a manifest."""
    if log is None:
        log = lambda msg: print(msg, file=sys.stderr)
    config.validate(require_dataset=False)
    manifest = _load_manifest(manifest_path)
    if not 0 <= sample_index < len(manifest.entries):
        raise DataError(
            f"sample index {sample_index} out of range; manifest has "
            f"{len(manifest.entries)} samples"
        )
    sample = _load_processed_one(manifest, sample_index, config.size)
    model = _load_model_for(config, manifest.num_labels, checkpoint_path)
    preds = predict_landmarks(model, [sample], batch_size=1)[0]
    present = {p.label_id for p in sample.points}
    for c in range(manifest.num_labels):
        if c not in present:
            log(f"label {c} ({manifest.label_names[c]}) absent from sample; no truth marker")
    canvas = render_overlay(sample.image[0], sample.points, preds)
    out_path = Path(out_path)
    try:
        Image.fromarray(canvas).save(out_path)
    except OSError as exc:
        raise DataError(f"cannot write overlay to {out_path}: {exc}") from exc
    return out_path


def _load_processed_one(manifest: DatasetManifest, index: int, size: int) -> ProcessedSample:
    try:
        return preprocess_sample(load_sample(manifest, index), size)
    except FileNotFoundError as exc:
        raise DataError(f"dataset file missing: {exc}") from None
    except ValueError as exc:
        raise DataError(f"bad sample {manifest.entries[index][0]}: {exc}") from exc
