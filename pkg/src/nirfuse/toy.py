"""Procedural scenes for demos, tests and desk-scale experiments.

Scenes are a smooth colour gradient with random rectangles and discs. The
NIR companion is a luminance-like projection of the clean scene, optionally
corrupted the way real NIR/RGB pairs disagree: a per-scene brightness offset
(global inconsistency) and a rectangle whose NIR content belongs to a
different scene (local inconsistency).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NoiseSpec, SceneImages, synth_noise


def make_clean(rng: np.random.Generator, size: int, n_shapes: int = 6) -> np.ndarray:
    """(3, size, size) clean RGB image in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, cx, cy = rng.uniform(0.2, 0.8, 3), rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.3, 0.3, 3)
    img = c0[:, None, None] + cx[:, None, None] * (xx - 0.5) + cy[:, None, None] * (yy - 0.5)
    for _ in range(n_shapes):
        color = rng.uniform(0.05, 0.95, 3)[:, None, None]
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, size, 2)
            h, w = rng.integers(size // 8 + 1, size // 2 + 2, 2)
            mask = (yy * (size - 1) >= y0) & (yy * (size - 1) < y0 + h) \
                & (xx * (size - 1) >= x0) & (xx * (size - 1) < x0 + w)
        else:
            cyx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.08, 0.3)
            mask = (yy - cyx[0]) ** 2 + (xx - cyx[1]) ** 2 < r * r
        img = np.where(mask[None], color, img)
    return np.clip(img, 0.0, 1.0)


def nir_from_clean(clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """(1, H, W) luminance-like projection with scene-dependent channel weights."""
    w = rng.dirichlet([4.0, 4.0, 4.0])
    return np.tensordot(w, clean, axes=1)[None]


@dataclass
class ToyTriples:
    noisy: np.ndarray   # (N, 3, H, W)
    clean: np.ndarray   # (N, 3, H, W)
    nir: np.ndarray     # (N, 1, H, W)

    def scenes(self):
        return [SceneImages(f"toy{i:03d}", c, n, y)
                for i, (y, c, n) in enumerate(zip(self.noisy, self.clean, self.nir))]


def make_triples(n: int, size: int, noise: NoiseSpec, seed: int = 0,
                 offset_range: float = 0.0, mask_fraction: float = 0.0) -> ToyTriples:
    """``n`` independent (noisy, clean, NIR) scenes of size x size.

    ``offset_range`` draws a per-scene NIR offset from U(-r, r);
    ``mask_fraction`` is the side of the inconsistent NIR rectangle relative
    to the image side (0 disables it).
    """
    rng = np.random.default_rng(seed)
    noisy, clean, nir = [], [], []
    for i in range(n):
        c = make_clean(rng, size)
        g = nir_from_clean(c, rng)
        if offset_range > 0:
            g = g + rng.uniform(-offset_range, offset_range)
        if mask_fraction > 0:
            side = max(1, int(round(mask_fraction * size)))
            y0, x0 = rng.integers(0, size - side + 1, 2)
            other = nir_from_clean(make_clean(rng, size), rng)
            g[:, y0:y0 + side, x0:x0 + side] = other[:, y0:y0 + side, x0:x0 + side]
        clean.append(c)
        nir.append(np.clip(g, 0.0, 1.0))
        noisy.append(synth_noise(c, noise.with_seed(noise.seed * 100003 + i)).data[0])
    return ToyTriples(np.stack(noisy), np.stack(clean), np.stack(nir))
