"""Deterministic toy scenes and masks for demos and end-to-end tests."""

from __future__ import annotations

import numpy as np


def toy_scene(height: int = 32, width: int = 32, bands: int = 4, seed: int = 7) -> np.ndarray:
    """Smooth synthetic cube in [0, 1]: band-shifted Gaussian blobs on a ramp."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cube = np.empty((bands, height, width))
    centers = rng.uniform(0.25, 0.75, size=(3, 2))
    amps = rng.uniform(0.4, 1.0, size=3)
    widths = rng.uniform(0.08, 0.2, size=3)
    for b in range(bands):
        phase = b / max(bands - 1, 1)
        plane = 0.15 + 0.25 * (xx / max(width - 1, 1)) * (1.0 - 0.5 * phase)
        for (cy, cx), amp, sg in zip(centers, amps, widths):
            cy_b = (cy + 0.08 * phase) * (height - 1)
            cx_b = (cx - 0.05 * phase) * (width - 1)
            r2 = ((yy - cy_b) / (sg * height)) ** 2 + ((xx - cx_b) / (sg * width)) ** 2
            plane = plane + amp * (0.9 - 0.4 * phase) * np.exp(-0.5 * r2)
        cube[b] = plane
    cube /= cube.max()
    return np.clip(cube, 0.0, 1.0)


def toy_mask(height: int = 32, width: int = 32, seed: int = 11) -> np.ndarray:
    """Random binary coded mask with roughly half the apertures open."""
    rng = np.random.default_rng(seed)
    return (rng.random((height, width)) < 0.5).astype(np.float64)
