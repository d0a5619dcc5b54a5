"""Seeded synthetic segmentation data: filled ellipses and rectangles with
class-dependent intensity on a noisy background, exact label masks.

On-disk dataset layout: a directory of paired img_%04d.d2t (f32, (1,H,W))
and lbl_%04d.d2t (u8, (H,W)) files plus meta.json holding count, size,
num_classes and seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, load_d2t, save_d2t

__all__ = ["SampleBatch", "synth_generate", "save_dataset", "load_dataset"]

_NOISE_SIGMA = 0.05
_BACKGROUND = 0.2
_INTENSITY_SPAN = 0.6
_MAX_FOREGROUND_FRACTION = 0.45


@dataclass
class SampleBatch:
    """images: (B,1,H,W) f32 in [0,1]; labels: (B,H,W) u8 class ids."""

    images: Tensor
    labels: Tensor


def _radius_range(size: int, num_classes: int) -> tuple:
    r_min = max(4, round(0.09 * size))
    r_max = max(r_min + 1, round(0.19 * size / np.sqrt(num_classes - 1)))
    return r_min, r_max


def _place_shape(rng, label, cls, r_min, r_max):
    """Try to place one non-overlapping shape; returns True on success."""
    size = label.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(200):
        ry = int(rng.integers(r_min, r_max + 1))
        rx = int(rng.integers(r_min, r_max + 1))
        cy = int(rng.integers(ry + 2, size - ry - 2))
        cx = int(rng.integers(rx + 2, size - rx - 2))
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        if not (label[mask] != 0).any():
            label[mask] = cls
            return True
    return False


def synth_generate(seed: int, count: int, size: int, num_classes: int) -> SampleBatch:
    """Deterministic batch of images/labels; every foreground class appears
    in every sample and total foreground stays under half the area."""
    if size % 32:
        raise ValueError(f"size {size} must be divisible by 32")
    if count < 1:
        raise ValueError("count must be >= 1")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2 (background + foreground)")

    rng = np.random.default_rng(seed)
    r_min, r_max = _radius_range(size, num_classes)
    images = np.empty((count, 1, size, size), dtype=np.float32)
    labels = np.zeros((count, size, size), dtype=np.uint8)
    area_cap = _MAX_FOREGROUND_FRACTION * size * size

    for i in range(count):
        label = labels[i]
        for cls in range(1, num_classes):
            placed = _place_shape(rng, label, cls, r_min, r_max)
            while not placed:  # tiny shapes always fit on an empty canvas
                placed = _place_shape(rng, label, cls, r_min, r_min + 1)
            if rng.random() < 0.5 and (label != 0).sum() < area_cap:
                _place_shape(rng, label, cls, r_min, r_max)
        intensity = _BACKGROUND + _INTENSITY_SPAN * label.astype(np.float64) / (num_classes - 1)
        noisy = intensity + rng.normal(0.0, _NOISE_SIGMA, size=intensity.shape)
        images[i, 0] = np.clip(noisy, 0.0, 1.0).astype(np.float32)

    return SampleBatch(images=Tensor(images), labels=Tensor(labels))


def save_dataset(directory, batch: SampleBatch, seed: int, num_classes: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    count = batch.images.shape[0]
    size = batch.images.shape[-1]
    for i in range(count):
        save_d2t(directory / f"img_{i:04d}.d2t", Tensor(batch.images.data[i]))
        save_d2t(directory / f"lbl_{i:04d}.d2t", Tensor(batch.labels.data[i]))
    meta = {"count": count, "size": size, "num_classes": num_classes, "seed": seed}
    (directory / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n"
    )


def load_dataset(directory):
    """Returns (SampleBatch, meta dict)."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no meta.json in {directory}")
    meta = json.loads(meta_path.read_text())
    images, labels = [], []
    for i in range(meta["count"]):
        images.append(load_d2t(directory / f"img_{i:04d}.d2t").data)
        labels.append(load_d2t(directory / f"lbl_{i:04d}.d2t").data)
    return SampleBatch(images=Tensor(np.stack(images)), labels=Tensor(np.stack(labels))), meta
