"""Synthetic image datasets and seed derivation."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .idx import write_idx


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Independent generator for a component, from the root seed and a label path."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for label in labels:
        digest = hashlib.sha256(str(label).encode()).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return np.random.default_rng(np.random.SeedSequence(words))


def _prototypes(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    bars_h = 0.5 + 0.5 * np.cos(2 * np.pi * 2 * yy)
    bars_v = 0.5 + 0.5 * np.cos(2 * np.pi * 2 * xx)
    blob = np.exp(-((xx - 0.5) ** 2 + (yy - 0.5) ** 2) / 0.06)
    return np.stack([bars_h, bars_v, blob])


def synthetic_images(n: int, rng: np.random.Generator, size: int = 16, num_classes: int = 3,
                     noise: float = 0.35) -> tuple[np.ndarray, np.ndarray]:
    """Noisy 3-class texture images as uint8 (N, H, W) with int labels.

    Classes are horizontal stripes, vertical stripes and a centred blob, each
    with random contrast, offset, a random shift up to two pixels and
    additive Gaussian noise.
    """
    protos = _prototypes(size)[:num_classes]
    labels = rng.integers(0, num_classes, size=n)
    imgs = np.empty((n, size, size))
    for i, c in enumerate(labels):
        img = protos[c]
        img = np.roll(img, tuple(rng.integers(-2, 3, size=2)), axis=(0, 1))
        img = rng.uniform(0.5, 1.0) * img + rng.uniform(0.0, 0.3)
        imgs[i] = img + noise * rng.standard_normal((size, size))
    return (np.clip(imgs, 0, 1) * 255).round().astype(np.uint8), labels.astype(np.int64)


def write_synthetic_nodes(root, nodes: int, per_node: int, seed: int, size: int = 16, test: int = 0) -> list[Path]:
    """Write per-node IDX datasets ``root/node<k>/{images,labels}.idx``; optional ``root/test``."""
    root = Path(root)
    dirs = []
    for k in range(nodes):
        d = root / f"node{k}"
        d.mkdir(parents=True, exist_ok=True)
        x, y = synthetic_images(per_node, derive_rng(seed, "synthetic", k), size)
        write_idx(d / "images.idx", x)
        write_idx(d / "labels.idx", y.astype(np.uint8))
        dirs.append(d)
    if test:
        d = root / "test"
        d.mkdir(parents=True, exist_ok=True)
        x, y = synthetic_images(test, derive_rng(seed, "synthetic", "test"), size)
        write_idx(d / "images.idx", x)
        write_idx(d / "labels.idx", y.astype(np.uint8))
    return dirs


def pixel_statistics(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-channel sums of per-image means and mean squares, and the image count.

    Summed over nodes and divided by the total image count these give the
    pooled pixel mean and second moment (all images share one size), while
    keeping every summand below the fixed-point magnitude bound.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if len(x) == 0:
        c = x.shape[1] if x.ndim == 4 else 1
        return np.zeros(c), np.zeros(c), 0
    return x.mean(axis=(2, 3)).sum(axis=0), (x**2).mean(axis=(2, 3)).sum(axis=0), len(x)
