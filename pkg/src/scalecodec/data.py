"""Labeled image datasets: a procedural 10-class desk set and PNG + CSV manifest ingestion.

The desk set draws one of ten shapes on a random smooth color field with
pixel noise. The shape identity is the label; background color, texture,
noise, shape color, position and size are nuisance content that a human
viewer needs but the classifier does not.
"""

import csv
import os
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
from PIL import Image

from .config import ExperimentConfig, resolve_path

SHAPES = ("disk", "square", "triangle_up", "triangle_down", "hbar", "vbar",
          "plus", "cross", "ring", "frame")

MANIFEST = "manifest.csv"


@dataclass
class LabeledDataset:
    images: torch.Tensor  # (N, 3, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (N,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be (N, 3, H, W), got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "LabeledDataset":
        return LabeledDataset(self.images[:n], self.labels[:n], self.split, self.num_classes)

    def batches(self, batch_size: int, generator: torch.Generator = None):
        """Yield ``(indices, images, labels)``; shuffled iff a generator is given."""
        n = len(self)
        order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield idx, self.images[idx], self.labels[idx]


def _sdf(kind: str, x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    """Signed distance-like field: negative inside the shape."""
    if kind == "disk":
        return np.hypot(x, y) - r
    if kind == "square":
        return np.maximum(np.abs(x), np.abs(y)) - 0.85 * r
    if kind in ("triangle_up", "triangle_down"):
        yy = y if kind == "triangle_up" else -y
        # equilateral-ish triangle, apex up in image coordinates (y grows downward)
        return np.maximum.reduce([-yy - 0.9 * r, 0.866 * x + 0.5 * yy - 0.45 * r,
                                  -0.866 * x + 0.5 * yy - 0.45 * r])
    if kind == "hbar":
        return np.maximum(np.abs(x) - r, np.abs(y) - 0.28 * r)
    if kind == "vbar":
        return np.maximum(np.abs(y) - r, np.abs(x) - 0.28 * r)
    if kind == "plus":
        return np.minimum(_sdf("hbar", x, y, r), _sdf("vbar", x, y, r))
    if kind == "cross":
        u, v = (x + y) / np.sqrt(2), (x - y) / np.sqrt(2)
        return _sdf("plus", u, v, r)
    if kind == "ring":
        return np.abs(np.hypot(x, y) - 0.72 * r) - 0.2 * r
    if kind == "frame":
        return np.abs(np.maximum(np.abs(x), np.abs(y)) - 0.72 * r) - 0.18 * r
    raise ValueError(kind)


def render(label: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One (3, size, size) image of class ``label`` quantized to 8 bits."""
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    # background: smooth random field per channel
    bg = np.empty((3, size, size))
    base = rng.uniform(0.15, 0.85, size=3)
    for c in range(3):
        field = np.full((size, size), base[c])
        for _ in range(3):
            fx, fy = rng.uniform(-3.0, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field += rng.uniform(0.03, 0.12) * np.cos(np.pi * (fx * xx + fy * yy) + phase)
        bg[c] = field
    bg += rng.normal(0.0, 0.025, size=bg.shape)
    # foreground: contrasted color
    lum = bg.mean()
    offset = rng.uniform(0.3, 0.45) * (1 if lum < 0.5 else -1)
    fg = np.clip(lum + offset + rng.uniform(-0.2, 0.2, size=3), 0.0, 1.0)
    cx, cy = rng.uniform(-0.18, 0.18, size=2)
    r = rng.uniform(0.45, 0.68)
    d = _sdf(SHAPES[label], xx - cx, yy - cy, r)
    alpha = np.clip(0.5 - d * size / 2.0, 0.0, 1.0)
    img = bg * (1 - alpha) + fg[:, None, None] * alpha
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def synthetic_dataset(n: int, seed: int, split: str = "train", size: int = 32,
                      num_classes: int = 10) -> LabeledDataset:
    """Balanced procedural dataset; deterministic in ``(n, seed, split)``."""
    if num_classes < 2 or num_classes > len(SHAPES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.stack([render(int(k), rng, size) for k in labels]).astype(np.float32)
    return LabeledDataset(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)),
                          split, num_classes)


def write_dataset(root: str, *datasets: LabeledDataset):
    """Write PNGs plus ``manifest.csv`` (``filename,label,split``)."""
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, MANIFEST), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label", "split"])
        for ds in datasets:
            for i in range(len(ds)):
                name = f"{ds.split}_{i:05d}.png"
                save_png(ds.images[i], os.path.join(root, name))
                writer.writerow([name, int(ds.labels[i]), ds.split])


def load_dataset(root: str, split: str, num_classes: int = 10) -> LabeledDataset:
    root = resolve_path(root)
    path = os.path.join(root, MANIFEST)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"filename", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest needs 'filename,label' columns")
        rows = [r for r in reader if r.get("split", split) == split]
    if not rows:
        raise ValueError(f"{path}: no rows for split {split!r}")
    images = torch.stack([load_png(os.path.join(root, r["filename"])) for r in rows])
    labels = torch.tensor([int(r["label"]) for r in rows], dtype=torch.int64)
    return LabeledDataset(images, labels, split, num_classes)


def load_png(path: str) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def save_png(image: torch.Tensor, path: str):
    arr = image.detach().cpu().clamp(0, 1).numpy().transpose(1, 2, 0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def datasets_for(config: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    """Train/val splits from ``config.dataset_root`` or, when empty, the procedural set."""
    if config.dataset_root:
        return (load_dataset(config.dataset_root, "train", config.num_classes),
                load_dataset(config.dataset_root, "val", config.num_classes))
    return (synthetic_dataset(config.synthetic_train, config.data_seed, "train",
                              config.image_size, config.num_classes),
            synthetic_dataset(config.synthetic_val, config.data_seed, "val",
                              config.image_size, config.num_classes))
