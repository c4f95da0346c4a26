"""Seeded synthetic image sets for desk-scale training checks."""

from __future__ import annotations

import numpy as np

from .dataset import LabeledDataset, Source

PATTERNS = ("hstripes", "vstripes", "disc", "checker")


def _pattern(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    period = int(rng.integers(4, 7))
    phase = int(rng.integers(0, period))
    if kind == "hstripes":
        mask = ((yy + phase) // (period // 2 or 1)) % 2 == 0
    elif kind == "vstripes":
        mask = ((xx + phase) // (period // 2 or 1)) % 2 == 0
    elif kind == "disc":
        cy, cx = rng.uniform(size * 0.35, size * 0.65, size=2)
        r = rng.uniform(size * 0.2, size * 0.3)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        cell = int(rng.integers(3, 6))
        mask = ((yy // cell) + (xx // cell)) % 2 == 0
    return mask


def synthetic_dataset(n: int = 400, size: int = 30, classes: int = 4, seed: int = 0,
                      noise: float = 0.1) -> LabeledDataset:
    """``n`` RGB images of ``classes`` texture classes (stripes, disc, checkerboard).

    Labels cycle through the classes so every class gets ``n // classes`` samples.
    """
    if not 1 <= classes <= len(PATTERNS):
        raise ValueError(f"classes must be in [1, {len(PATTERNS)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i, lab in enumerate(labels):
        mask = _pattern(PATTERNS[lab], size, rng)
        fg = rng.uniform(0.6, 1.0, size=3)
        bg = rng.uniform(0.0, 0.4, size=3)
        img = np.where(mask[..., None], fg, bg) + rng.normal(0, noise, size=(size, size, 3))
        images[i] = np.clip(img, 0, 1)
    return LabeledDataset(images, labels, source=Source.SYNTHETIC, class_count=classes)
