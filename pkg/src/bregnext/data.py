"""Dataset ingestion, the synthetic desk-scale generator, checkpoint
serialization, and feature-map export."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import imageops
from .builder import (Model, build_network, config_from_dict, config_to_dict)

IMAGE_SIZE = 64

# FER2013 public CSV conventions: native label order and per-class totals.
FER2013_CLASS_NAMES = ("anger", "disgust", "fear", "happy", "sad",
                       "surprise", "neutral")
FER2013_EXPECTED_COUNTS = {
    "neutral": 6198, "happy": 8989, "sad": 6077, "surprise": 4002,
    "fear": 5121, "disgust": 547, "anger": 4953,
}
FER2013_TOTAL = 35887
_FER_PIXELS = 48 * 48
_FER_SPLITS = {"Training": "train", "PublicTest": "validation",
               "PrivateTest": "test"}


class DatasetError(Exception):
    """Malformed or unusable dataset input."""


class CheckpointError(Exception):
    """Unreadable, truncated, or mismatched checkpoint."""


@dataclass
class Sample:
    image: np.ndarray  # 64x64x3 float32 in [0, 1]
    label: object  # class index or (valence, arousal)
    split: str


class Dataset:
    """Columnar sample store: images plus categorical and dimensional
    labels (either may be absent)."""

    def __init__(self, images, class_labels=None, va_labels=None,
                 splits=None, num_classes=None):
        self.images = np.asarray(images, dtype=np.float32)
        self.class_labels = (None if class_labels is None
                             else np.asarray(class_labels, dtype=np.int64))
        self.va_labels = (None if va_labels is None
                          else np.asarray(va_labels, dtype=np.float32))
        n = len(self.images)
        self.splits = (np.asarray(splits) if splits is not None
                       else np.full(n, "train"))
        self.num_classes = num_classes

    def __len__(self):
        return len(self.images)

    def subset(self, split: str) -> "Dataset":
        mask = self.splits == split
        return Dataset(
            self.images[mask],
            None if self.class_labels is None else self.class_labels[mask],
            None if self.va_labels is None else self.va_labels[mask],
            self.splits[mask], self.num_classes)

    def samples(self):
        for i in range(len(self)):
            label = (self.class_labels[i] if self.class_labels is not None
                     else tuple(self.va_labels[i]))
            yield Sample(self.images[i], label, str(self.splits[i]))

    def class_histogram(self) -> np.ndarray:
        if self.class_labels is None:
            raise DatasetError("dataset has no categorical labels")
        return np.bincount(self.class_labels, minlength=self.num_classes or 0)

    def channel_means(self) -> np.ndarray:
        return self.images.mean(axis=(0, 1, 2))


def load_fer2013(csv_path) -> Dataset:
    """Parse the public FER2013 CSV: header `emotion,pixels,Usage`, each
    row 2304 space-separated grayscale bytes.  Images are resized to
    64x64 bilinearly and replicated to three channels."""
    path = Path(csv_path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    images, labels, splits = [], [], []
    with open(path, "r", newline="") as fh:
        header = fh.readline().strip()
        if header.replace(" ", "") != "emotion,pixels,Usage":
            raise DatasetError(
                f"unexpected header {header!r}; need 'emotion,pixels,Usage'")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DatasetError(f"row {lineno}: expected 3 fields")
            try:
                label = int(parts[0])
                pixels = np.array(parts[1].split(), dtype=np.float32)
            except ValueError as exc:
                raise DatasetError(f"row {lineno}: {exc}") from exc
            if not 0 <= label <= 6:
                raise DatasetError(f"row {lineno}: label {label} out of range")
            if pixels.size != _FER_PIXELS:
                raise DatasetError(
                    f"row {lineno}: {pixels.size} pixels, expected "
                    f"{_FER_PIXELS}")
            if parts[2] not in _FER_SPLITS:
                raise DatasetError(
                    f"row {lineno}: unknown Usage {parts[2]!r}")
            gray = pixels.reshape(48, 48) / 255.0
            img = imageops.bilinear_resize(gray, IMAGE_SIZE, IMAGE_SIZE)
            images.append(np.repeat(img[:, :, None], 3, axis=2))
            labels.append(label)
            splits.append(_FER_SPLITS[parts[2]])
    if not images:
        raise DatasetError(f"{path}: no data rows")
    return Dataset(np.stack(images), labels, None, splits, num_classes=7)


def fer2013_table_histogram(dataset: Dataset) -> dict:
    """Per-class counts keyed by expression name."""
    hist = dataset.class_histogram()
    return {name: int(hist[i]) for i, name in enumerate(FER2013_CLASS_NAMES)}


# Distinct render palette and stripe parameters per synthetic class.
_PALETTE = np.array([
    [0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.3, 0.9], [0.9, 0.9, 0.2],
    [0.9, 0.3, 0.9], [0.2, 0.9, 0.9], [0.95, 0.6, 0.2], [0.7, 0.7, 0.7],
])


def synth_blobs(num_classes: int, n_per_class: int, seed: int = 0) -> Dataset:
    """Deterministic synthetic textures: class k renders tinted stripes at
    its own orientation and frequency, with small per-sample phase jitter
    and pixel noise.  Dimensional labels map each class to a fixed
    (valence, arousal) anchor plus clipped Gaussian noise."""
    if not 1 <= num_classes <= 8:
        raise ValueError("synthetic generator supports 1..8 classes")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, IMAGE_SIZE),
                         np.linspace(0, 1, IMAGE_SIZE), indexing="ij")
    images = np.empty((num_classes * n_per_class, IMAGE_SIZE, IMAGE_SIZE, 3),
                      dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    va = np.empty((len(labels), 2), dtype=np.float32)
    angles = np.pi * np.arange(num_classes) / max(num_classes, 1)
    freqs = 2.0 + np.arange(num_classes)
    anchor_theta = 2.0 * np.pi * np.arange(num_classes) / max(num_classes, 1)
    anchors = 0.8 * np.stack([np.cos(anchor_theta), np.sin(anchor_theta)],
                             axis=1)
    for i, k in enumerate(labels):
        phase = rng.uniform(-0.3, 0.3)
        coord = xx * np.cos(angles[k]) + yy * np.sin(angles[k])
        pattern = 0.5 + 0.45 * np.sin(2.0 * np.pi * freqs[k] * coord + phase)
        img = pattern[:, :, None] * _PALETTE[k]
        img = img + rng.normal(0.0, 0.05, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
        va[i] = np.clip(anchors[k] + rng.normal(0.0, 0.05, 2), -1.0, 1.0)
    return Dataset(images, labels, va, num_classes=num_classes)


# ---------------------------------------------------------------------------
# checkpoints (.bngx): magic, version, JSON header, raw little-endian data

_MAGIC = b"BNGX"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path, optimizer_state=None,
                    log_tail=None) -> None:
    """Self-describing binary checkpoint; round trips bitwise."""
    entries = []
    blobs = []
    offset = 0
    for entry in model.store:
        raw = np.ascontiguousarray(entry.value,
                                   dtype=entry.value.dtype.newbyteorder("<"))
        data = raw.tobytes()
        entries.append({
            "name": entry.name,
            "shape": list(entry.value.shape),
            "dtype": str(entry.value.dtype),
            "offset": offset,
            "nbytes": len(data),
            "trainable": bool(entry.trainable),
        })
        blobs.append(data)
        offset += len(data)
    header = {
        "config": config_to_dict(model.config),
        "input_hw": list(model.input_hw),
        "dtype": str(model.dtype),
        "entries": entries,
        "optimizer": _optimizer_to_doc(optimizer_state),
        "log_tail": log_tail,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def _optimizer_to_doc(state):
    if state is None:
        return None
    return {
        "base_lr": state.base_lr, "decay_factor": state.decay_factor,
        "decay_period": state.decay_period,
        "l2_coefficient": state.l2_coefficient, "beta1": state.beta1,
        "beta2": state.beta2, "epsilon": state.epsilon, "step": state.step,
    }


def load_checkpoint(path, expected_arch: str | None = None) -> Model:
    """Rebuild the model described by a checkpoint and restore every
    parameter bitwise.  Raises CheckpointError on any structural defect."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected "
            f"{CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    body_start = 16 + header_len
    if len(raw) < body_start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    config = config_from_dict(header["config"])
    if expected_arch is not None and config.name != expected_arch.lower():
        raise CheckpointError(
            f"{path}: checkpoint holds '{config.name}', requested "
            f"'{expected_arch.lower()}'")

    total = sum(e["nbytes"] for e in header["entries"])
    if len(raw) != body_start + total:
        raise CheckpointError(
            f"{path}: truncated data section "
            f"({len(raw) - body_start} of {total} bytes)")

    model = build_network(config, dtype=np.dtype(header["dtype"]),
                          input_hw=tuple(header["input_hw"]))
    names = set(model.store.names())
    stored = {e["name"] for e in header["entries"]}
    if names != stored:
        missing = sorted(names - stored)[:3]
        extra = sorted(stored - names)[:3]
        raise CheckpointError(
            f"{path}: parameter name mismatch (missing {missing}, "
            f"unexpected {extra})")
    for meta in header["entries"]:
        entry = model.store[meta["name"]]
        if list(entry.value.shape) != meta["shape"]:
            raise CheckpointError(
                f"{path}: shape mismatch for '{meta['name']}': "
                f"{meta['shape']} vs {list(entry.value.shape)}")
        start = body_start + meta["offset"]
        arr = np.frombuffer(raw[start:start + meta["nbytes"]],
                            dtype=np.dtype(meta["dtype"]))
        entry.value[...] = arr.reshape(meta["shape"])
    model.mark_bn_stats_recorded()
    return model


def load_checkpoint_optimizer(path):
    """Optimizer hyperparameters/step stored alongside the model, if any."""
    raw = Path(path).read_bytes()
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    return header.get("optimizer")


# ---------------------------------------------------------------------------
# feature-map export

def _tile_channels(fmap: np.ndarray) -> np.ndarray:
    """Arrange (H, W, C) channels into a near-square grid of grayscale
    tiles, each min-max normalized (constant maps render mid-gray)."""
    h, w, c = fmap.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    grid = np.full((rows * h, cols * w), 128, dtype=np.uint8)
    for ch in range(c):
        tile = fmap[:, :, ch]
        lo, hi = float(tile.min()), float(tile.max())
        if hi > lo:
            tile8 = np.round((tile - lo) / (hi - lo) * 255).astype(np.uint8)
        else:
            tile8 = np.full((h, w), 128, dtype=np.uint8)
        r, col = divmod(ch, cols)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = tile8
    return grid


def dump_feature_maps(model: Model, image: np.ndarray, selectors,
                      out_dir) -> list[Path]:
    """Write one grayscale PNG channel-grid per selected residual unit.
    Selectors are unit names (e.g. 's2u1') or 1-based unit ordinals."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_name = dict(model.unit_outputs)
    chosen = []
    for sel in selectors:
        if isinstance(sel, int):
            if not 1 <= sel <= len(model.unit_outputs):
                raise KeyError(f"unit ordinal {sel} out of range "
                               f"1..{len(model.unit_outputs)}")
            chosen.append(model.unit_outputs[sel - 1])
        elif sel in by_name:
            chosen.append((sel, by_name[sel]))
        else:
            raise KeyError(f"unknown unit selector {sel!r}")
    if not chosen:
        return []
    feeds = {model.input.name: image[None].astype(model.dtype)}
    values = ad.evaluate([node for _, node in chosen], feeds, training=False)
    written = []
    for name, node in chosen:
        grid = _tile_channels(values[node.name][0])
        path = out_dir / f"{name}.png"
        Image.fromarray(grid, mode="L").save(path)
        written.append(path)
    return written


def save_channel_stats(dataset: Dataset, path) -> None:
    doc = {"channel_means": [float(v) for v in dataset.channel_means()]}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_channel_stats(path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    return np.asarray(doc["channel_means"], dtype=np.float32)
