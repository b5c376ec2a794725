"""CIFAR binary-format ingestion, seeded splits, synthetic data and augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

RECORD_BYTES = 3073
IMAGE_BYTES = 3072

CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616])

CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class Dataset:
    """Images in [0, 1] (NCHW, float) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    mean: np.ndarray = field(default_factory=lambda: CIFAR10_MEAN.copy())
    std: np.ndarray = field(default_factory=lambda: CIFAR10_STD.copy())

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.mean, self.std)

    def normalized(self, idx=None) -> np.ndarray:
        x = self.images if idx is None else self.images[idx]
        return (x - self.mean.reshape(1, -1, 1, 1)) / self.std.reshape(1, -1, 1, 1)


def decode_cifar(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode concatenated 3073-byte records into uint8 images [N,3,32,32] and labels."""
    n, rem = divmod(len(raw), RECORD_BYTES)
    if rem:
        raise ValueError(f"{source}: truncated record at byte offset {n * RECORD_BYTES} "
                         f"({rem} of {RECORD_BYTES} bytes present)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(n, 3, 32, 32)
    return images, labels


def encode_cifar(images: np.ndarray, labels: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    if images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR records hold 3x32x32 images, got {images.shape[1:]}")
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images.reshape(len(images), -1)], axis=1)
    return rec.tobytes()


def load_cifar(path: str, num_classes: int = 10) -> Dataset:
    """Load one CIFAR binary file, or every known batch file in a directory."""
    if os.path.isdir(path):
        names = [f for f in CIFAR_TRAIN_FILES if os.path.exists(os.path.join(path, f))]
        if not names:
            raise FileNotFoundError(f"no CIFAR batch files found in {path}")
        files = [os.path.join(path, f) for f in names]
    else:
        files = [path]
    imgs, labs = [], []
    for f in files:
        with open(f, "rb") as fh:
            i, lab = decode_cifar(fh.read(), f)
        imgs.append(i)
        labs.append(lab)
    images = np.concatenate(imgs).astype(np.float64) / 255.0
    return Dataset(images, np.concatenate(labs), num_classes)


def split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random partition into two disjoint parts; the first gets round(fraction * N)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    k = int(round(fraction * len(ds)))
    return ds.subset(np.sort(perm[:k])), ds.subset(np.sort(perm[k:]))


def synthetic_cifar(n: int, num_classes: int = 10, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random uint8 images and labels in CIFAR record layout, for offline format tests."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8), rng.integers(0, num_classes, n)


def oriented_gratings(n: int, seed: int = 0, size: int = 32, noise: float = 0.6,
                      num_classes: int = 2) -> Dataset:
    """Two-class toy images: noisy gratings whose orientation (near 0 vs near 90 deg) is the label.

    Orientation jitter, random phase/frequency/colour and pixel noise keep the
    task from being linearly trivial; class decisions depend on local
    spatial structure, which larger receptive fields see better.
    """
    if num_classes != 2:
        raise ValueError("oriented_gratings generates exactly 2 classes")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    theta = labels * (np.pi / 2) + rng.uniform(-0.5, 0.5, n)
    freq = rng.uniform(0.15, 0.35, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    wave = np.sin(freq[:, None, None] * proj * 2 * np.pi / 4 + phase[:, None, None])
    colour = rng.uniform(0.3, 1.0, (n, 3))
    img = 0.5 + 0.25 * wave[:, None] * colour[:, :, None, None]
    img = img + noise * rng.normal(size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    mean = img.mean(axis=(0, 2, 3))
    std = img.std(axis=(0, 2, 3))
    return Dataset(img, labels.astype(np.int64), 2, mean, std)


def toy_preset(data_dir: Optional[str] = None, n: int = 2500, seed: int = 0) -> Dataset:
    """Desk-scale preset: first 2 classes, ``n`` images, 32x32.

    Uses CIFAR-10 from ``data_dir`` when given, otherwise the synthetic grating task.
    """
    if data_dir is None:
        return oriented_gratings(n, seed)
    full = load_cifar(data_dir)
    keep = np.flatnonzero(full.labels < 2)[:n]
    return Dataset(full.images[keep], full.labels[keep], 2)


def downsample(images: np.ndarray, factor: int) -> np.ndarray:
    """Block-average NCHW images by an integer factor."""
    if factor == 1:
        return images
    n, c, h, w = images.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by {factor}")
    return images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


@dataclass(frozen=True)
class AugmentPolicy:
    pad_crop: int = 4
    flip: bool = True
    cutout: int = 0
    mixup: float = 0.0


def pad_crop(x: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by ``pad`` on each side, then take a random crop of the original size per image."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    out = np.empty_like(x)
    for i in range(n):
        out[i] = xp[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def flip(x: np.ndarray, decisions: np.ndarray) -> np.ndarray:
    out = x.copy()
    out[decisions] = out[decisions, :, :, ::-1]
    return out


def cutout(x: np.ndarray, length: int, rng: np.random.Generator, centers: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero one ``length`` x ``length`` square per image, clipped at the borders."""
    n, c, h, w = x.shape
    if length > min(h, w):
        raise ValueError(f"cutout length {length} exceeds image size {h}x{w}")
    if centers is None:
        centers = np.stack([rng.integers(0, h, n), rng.integers(0, w, n)], axis=1)
    out = x.copy()
    for i, (cy, cx) in enumerate(centers):
        y0, y1 = max(0, cy - length // 2), min(h, cy - length // 2 + length)
        x0, x1 = max(0, cx - length // 2), min(w, cx - length // 2 + length)
        out[i, :, y0:y1, x0:x1] = 0.0
    return out


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup(x: np.ndarray, labels: np.ndarray, k: int, a: float, rng: np.random.Generator,
          lam: Optional[float] = None):
    """Blend each image with a shuffled partner; returns images and soft labels."""
    if a <= 0 and lam is None:
        raise ValueError("mixup needs a positive Beta parameter")
    lam = rng.beta(a, a) if lam is None else lam
    perm = rng.permutation(len(x))
    y = one_hot(labels, k)
    return lam * x + (1 - lam) * x[perm], lam * y + (1 - lam) * y[perm]


def augment(x: np.ndarray, labels: np.ndarray, k: int, policy: AugmentPolicy, rng: np.random.Generator):
    """Apply crop, flip, cutout (on normalized input) and mixup; labels become soft only under mixup."""
    if policy.pad_crop:
        x = pad_crop(x, policy.pad_crop, rng)
    if policy.flip:
        x = flip(x, rng.random(len(x)) < 0.5)
    if policy.cutout:
        x = cutout(x, policy.cutout, rng)
    if policy.mixup:
        return mixup(x, labels, k, policy.mixup, rng)
    return x, labels


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None,
            drop_last: bool = False) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if drop_last and out and len(out[-1]) < batch_size:
        out.pop()
    return out


def class_counts(labels: Sequence[int], k: int) -> np.ndarray:
    return np.bincount(np.asarray(labels), minlength=k)
