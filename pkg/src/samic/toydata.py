"""Synthetic two-texture images for desk-scale experiments.

Each image splits vertically into a smooth colour-wave region and a
hard checkerboard region, with strong per-pixel noise everywhere so the
source stays information-dense (the rate term has something real to
code). The split point, wave phase and frequency vary per sample.
"""

from __future__ import annotations

import numpy as np


def two_texture_image(rng: np.random.Generator, height: int = 64,
                      width: int = 64, noise: float = 0.15) -> np.ndarray:
    img = np.zeros((3, height, width))
    yy = np.mgrid[0:height, 0:width][0] / height
    phase = rng.uniform(0, 2 * np.pi, 3)
    freq = rng.uniform(2, 4)
    for c in range(3):
        img[c] = 0.5 + 0.3 * np.sin(freq * np.pi * (yy + 0.3 * c) + phase[c])
    split = width // 2
    checker = ((np.indices((height, width - split)).sum(axis=0)) % 2) * 0.5 + 0.25
    for c in range(3):
        img[c, :, split:] = checker
    img += rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 1)


def make_dataset(seed: int, count: int, height: int = 64, width: int = 64,
                 noise: float = 0.15) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [two_texture_image(rng, height, width, noise) for _ in range(count)]
