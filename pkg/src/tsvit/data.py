"""Seeded synthetic images: smooth sinusoid mixtures plus a little pixel noise."""

from __future__ import annotations

import numpy as np


def synthetic_images(n: int, C: int, H: int, W: int, seed: int = 0, n_waves: int = 4, noise: float = 0.05) -> np.ndarray:
    """``n x C x H x W`` float64 images with values in ``[0, 1]``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    out = np.empty((n, C, H, W))
    for i in range(n):
        for c in range(C):
            img = np.zeros((H, W))
            for _ in range(n_waves):
                fy, fx = rng.uniform(0.5, 6.0, 2)
                phase = rng.uniform(0, 2 * np.pi)
                img += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
            img += noise * rng.normal(size=(H, W))
            lo, hi = img.min(), img.max()
            out[i, c] = (img - lo) / (hi - lo) if hi > lo else 0.5
    return out


def synthetic_views(cfg, n: int = 1, seed: int = 0) -> np.ndarray:
    """``n x V x C x H x W`` multi-view batch for an encoder config."""
    flat = synthetic_images(n * cfg.V, cfg.C, cfg.H, cfg.W, seed=seed)
    return flat.reshape(n, cfg.V, cfg.C, cfg.H, cfg.W)
