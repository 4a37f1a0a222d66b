"""Synthetic four-regime image dataset.

Regimes (image 3x32x32, label 0..9):

0. global grating: a full-image sinusoid; label = orientation bin (10 bins over 180 deg).
1. local texture: high-frequency stripes/checks; label = 2 * pattern (5 kinds) + period bit.
2. smooth blobs: 1..5 wide Gaussian blobs; label = 2 * (count - 1) + dominant-colour bit.
3. nested shapes: 1..5 concentric squares or rings; label = 2 * (levels - 1) + ring bit.

Sample ``i`` is generated from ``np.random.default_rng([seed, i])`` so any
record can be regenerated on its own.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

NUM_REGIMES = 4
NUM_CLASSES = 10
SIZE = 32
NOISE = 0.1

_yy, _xx = np.meshgrid(np.arange(SIZE) / SIZE, np.arange(SIZE) / SIZE, indexing="ij")


@dataclass(frozen=True)
class SyntheticScene:
    image: np.ndarray  # [3, 32, 32]
    regime: int
    label: int
    seed: Tuple[int, int]


def _colour(rng) -> np.ndarray:
    return rng.uniform(0.5, 1.0, size=3)


def _grating(rng, label: int) -> np.ndarray:
    theta = (label + rng.uniform(0.2, 0.8)) * np.pi / NUM_CLASSES
    freq = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (_xx * np.cos(theta) + _yy * np.sin(theta)) + phase)
    return _colour(rng)[:, None, None] * wave


def _texture(rng, label: int) -> np.ndarray:
    kind, period = divmod(label, 2)
    period = 2 + period  # 2 or 3 pixels
    iy, ix = np.mgrid[0:SIZE, 0:SIZE]
    off = rng.integers(0, 6)
    if kind == 0:
        pat = ((ix + off) // period) % 2
    elif kind == 1:
        pat = ((iy + off) // period) % 2
    elif kind == 2:
        pat = ((ix + iy + off) // period) % 2
    elif kind == 3:
        pat = ((ix - iy + off) // period) % 2
    else:
        pat = (((ix + off) // period) + ((iy + off) // period)) % 2
    pat = 2.0 * pat - 1.0
    return rng.uniform(0.6, 1.0) * _colour(rng)[:, None, None] * pat


def _blobs(rng, label: int) -> np.ndarray:
    count, dominant = divmod(label, 2)
    count += 1
    field = np.zeros((SIZE, SIZE))
    for _ in range(count):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        sigma = rng.uniform(0.08, 0.12)
        field += np.exp(-((_yy - cy) ** 2 + (_xx - cx) ** 2) / (2 * sigma**2))
    colour = np.full(3, 0.3)
    colour[dominant] = 1.0
    return colour[:, None, None] * (2.0 * np.clip(field, 0, 1) - 1.0)


def _nested(rng, label: int) -> np.ndarray:
    levels, ring = divmod(label, 2)
    levels += 1
    cy, cx = rng.uniform(0.4, 0.6, size=2)
    dy, dx = np.abs(_yy - cy), np.abs(_xx - cx)
    dist = np.sqrt(dy**2 + dx**2) if ring else np.maximum(dy, dx)
    outer = rng.uniform(0.38, 0.45)
    step = outer / levels
    band = np.floor(dist / step)
    img = np.where(band < levels, np.where(band % 2 == 0, 1.0, -1.0), 0.0)
    return _colour(rng)[:, None, None] * img


_GENERATORS = (_grating, _texture, _blobs, _nested)


def make_scene(seed: int, index: int, regime: int) -> SyntheticScene:
    rng = np.random.default_rng([int(seed), int(index)])
    label = int(rng.integers(0, NUM_CLASSES))
    clean = _GENERATORS[regime](rng, label)
    image = clean + NOISE * rng.standard_normal((3, SIZE, SIZE))
    return SyntheticScene(image=image, regime=regime, label=label, seed=(int(seed), int(index)))


def generate_dataset(n: int, seed: int) -> List[SyntheticScene]:
    """``n`` scenes with regimes as balanced as ``n`` allows, in a seeded shuffled order."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    regimes = np.arange(n) % NUM_REGIMES
    order = np.random.default_rng([int(seed), 0xDA7A]).permutation(n)
    return [make_scene(seed, i, int(regimes[j])) for i, j in enumerate(order)]


def stack_batch(scenes: Sequence[SyntheticScene]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in scenes])
    labels = np.array([s.label for s in scenes], dtype=np.int64)
    regimes = np.array([s.regime for s in scenes], dtype=np.int64)
    return images, labels, regimes


def dataset_manifest(scenes: Sequence[SyntheticScene], seed: int) -> Dict:
    counts = np.bincount([s.regime for s in scenes], minlength=NUM_REGIMES)
    return {"seed": int(seed), "n": len(scenes), "regime_counts": [int(c) for c in counts]}
