"""Dataset loading, normalization, deterministic splits/batching,
augmentation, and the synthetic oriented-grating generator used for
desk-scale experiments.

Directory layout for on-disk datasets: root/<class_name>/*.png, one
subdirectory per class, PNG only. Classes and files are ordered
lexicographically so loading is deterministic.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64 in [0, K)
    class_names: list
    stats: tuple | None = None  # (mean, std) per channel, set by normalize

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be rank 4, got {self.images.shape}")
        n = self.images.shape[0]
        if n == 0:
            raise DataError("empty dataset")
        if self.labels.shape != (n,):
            raise DataError(f"labels shape {self.labels.shape} != ({n},)")
        k = len(self.class_names)
        if self.labels.min() < 0 or self.labels.max() >= k:
            raise DataError("label out of range")

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self):
        return len(self.class_names)


@dataclass(frozen=True)
class SplitSpec:
    val_fraction: float
    shuffle_seed: int

    def __post_init__(self):
        if not (0.0 < self.val_fraction < 1.0):
            raise DataError(
                f"val_fraction must be in (0, 1), got {self.val_fraction}"
            )


def load_image_dir(root_path, image_size, channels):
    """Load root/<class>/*.png into a dataset.

    Images are bilinearly resized to image_size x image_size and scaled to
    [0, 1]. Classes sort lexicographically by directory name, files by
    filename within each class.
    """
    if channels not in (1, 3):
        raise DataError(f"channels must be 1 or 3, got {channels}")
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class directories under {root}")

    images, labels, class_names = [], [], []
    mode = "L" if channels == 1 else "RGB"
    for label, d in enumerate(class_dirs):
        files = sorted(d.glob("*.png"))
        if not files:
            raise DataError(f"class directory {d} contains no PNG files")
        class_names.append(d.name)
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert(mode).resize(
                        (image_size, image_size), Image.BILINEAR
                    )
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except OSError as e:
                raise DataError(f"unreadable image file {f}: {e}") from e
            if channels == 1:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(label)
    return LabeledDataset(
        np.stack(images), np.asarray(labels, dtype=np.int64), class_names
    )


def normalize(ds, stats_from=None):
    """Per-channel standardization: x <- (x - mean_c) / std_c.

    Pass stats_from (a (mean, std) pair from the training split) when
    normalizing validation/test data; otherwise stats are fitted here.
    """
    if stats_from is not None:
        mean, std = stats_from
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
    else:
        mean = ds.images.mean(axis=(0, 2, 3))
        std = ds.images.std(axis=(0, 2, 3))
    if np.any(std <= 0.0):
        raise DataError("constant channel: zero std, cannot normalize")
    images = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    return LabeledDataset(images, ds.labels, ds.class_names, stats=(mean, std))


def augment(batch, flip_prob, crop_padding, rng):
    """Per-image random horizontal flip + random crop from a zero-padded
    frame. Output shape equals input shape; identity when both knobs are 0."""
    if crop_padding < 0:
        raise DataError(f"crop_padding must be >= 0, got {crop_padding}")
    batch = np.asarray(batch, dtype=np.float64)
    if flip_prob == 0.0 and crop_padding == 0:
        return batch.copy()
    n, c, h, w = batch.shape
    out = np.empty_like(batch)
    p = crop_padding
    for i in range(n):
        img = batch[i]
        if flip_prob > 0.0 and rng.random() < flip_prob:
            img = img[:, :, ::-1]
        if p > 0:
            padded = np.pad(img, ((0, 0), (p, p), (p, p)))
            oy = rng.integers(0, 2 * p + 1)
            ox = rng.integers(0, 2 * p + 1)
            img = padded[:, oy : oy + h, ox : ox + w]
        out[i] = img
    return out


def gen_texture_dataset(n_per_class, image_size, classes, noise_std, seed):
    """Synthetic oriented-grating classification set.

    Class j's grating orientation is theta_j = j * pi / classes; each image
    gets a random phase U(0, 2pi) and frequency U(0.3, 1.2) rad/pixel plus
    Gaussian pixel noise, clipped to [0, 1]. Single channel.
    """
    if not (2 <= classes <= 8):
        raise DataError(f"classes must be in [2, 8], got {classes}")
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:image_size, 0:image_size].astype(np.float64)

    images = np.empty((classes * n_per_class, 1, image_size, image_size))
    labels = np.empty(classes * n_per_class, dtype=np.int64)
    idx = 0
    for j in range(classes):
        theta = j * math.pi / classes
        proj = x * math.cos(theta) + y * math.sin(theta)
        for _ in range(n_per_class):
            phase = rng.uniform(0.0, 2.0 * math.pi)
            freq = rng.uniform(0.3, 1.2)
            img = 0.5 + 0.5 * np.cos(freq * proj + phase)
            if noise_std > 0.0:
                img = img + rng.normal(0.0, noise_std, size=img.shape)
            images[idx, 0] = np.clip(img, 0.0, 1.0)
            labels[idx] = j
            idx += 1
    class_names = [f"orient_{j:02d}" for j in range(classes)]
    return LabeledDataset(images, labels, class_names)


def save_dataset_png(ds, out_dir):
    """Write a dataset in the root/<class>/*.png layout (8-bit)."""
    out = Path(out_dir)
    for name in ds.class_names:
        (out / name).mkdir(parents=True, exist_ok=True)
    counters = [0] * ds.num_classes
    for img, label in zip(ds.images, ds.labels):
        arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        if arr.shape[0] == 1:
            pil = Image.fromarray(arr[0], mode="L")
        else:
            pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
        name = ds.class_names[label]
        pil.save(out / name / f"img_{counters[label]:05d}.png")
        counters[label] += 1


def split(ds, spec):
    """Deterministic shuffled partition; floor(N * val_fraction) samples go
    to validation, the rest to training."""
    n = len(ds)
    order = np.random.default_rng(spec.shuffle_seed).permutation(n)
    n_val = int(math.floor(n * spec.val_fraction))
    if n_val < 1 or n_val >= n:
        raise DataError(f"degenerate split: {n} samples, {n_val} validation")
    val_idx, train_idx = order[:n_val], order[n_val:]

    def _take(idx):
        return LabeledDataset(
            ds.images[idx].copy(), ds.labels[idx].copy(), ds.class_names, ds.stats
        )

    return _take(train_idx), _take(val_idx)


def batches(ds, batch_size, shuffle_seed, epoch):
    """Yield (images, labels) batches in a per-epoch deterministic shuffled
    order; the final partial batch is kept."""
    if batch_size < 1:
        raise ShapeError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([shuffle_seed, epoch])
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]
