"""Procedural phantom data for desk-scale training and tests.

Slices are head-like: a large bright ellipse containing randomly placed
elliptical structures with sharp boundaries plus a mild intensity gradient,
so through-plane degradation destroys genuine high-frequency content that a
super-resolver can plausibly recover.
"""

from __future__ import annotations

import numpy as np

from .volume import Volume


def phantom_slice(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    cy = size / 2 + rng.uniform(-0.05, 0.05) * size
    cx = size / 2 + rng.uniform(-0.05, 0.05) * size
    ry = rng.uniform(0.32, 0.42) * size
    rx = rng.uniform(0.32, 0.42) * size
    theta = rng.uniform(0.0, np.pi)
    c, s = np.cos(theta), np.sin(theta)

    def ellipse_mask(ecy, ecx, ery, erx, eth):
        ec, es = np.cos(eth), np.sin(eth)
        u = ((yy - ecy) * ec + (xx - ecx) * es) / ery
        v = (-(yy - ecy) * es + (xx - ecx) * ec) / erx
        return u * u + v * v <= 1.0

    head = ellipse_mask(cy, cx, ry, rx, theta)
    img[head] = rng.uniform(0.35, 0.55)

    for _ in range(int(rng.integers(4, 9))):
        ecy = cy + rng.uniform(-0.2, 0.2) * size
        ecx = cx + rng.uniform(-0.2, 0.2) * size
        ery = rng.uniform(0.03, 0.14) * size
        erx = rng.uniform(0.03, 0.14) * size
        mask = ellipse_mask(ecy, ecx, ery, erx, rng.uniform(0.0, np.pi)) & head
        img[mask] = np.clip(img[mask] + rng.uniform(-0.35, 0.5), 0.02, 1.0)

    gy, gx = rng.uniform(-1.0, 1.0, size=2)
    img[head] *= 1.0 + 0.12 * (gy * (yy[head] - cy) / size + gx * (xx[head] - cx) / size)
    return np.clip(img, 0.0, 1.2)


def phantom_slices(n: int, size: int = 64, seed: int = 0):
    """Deterministic corpus of n phantom slices."""
    rng = np.random.default_rng(seed)
    return [phantom_slice(rng, size) for _ in range(n)]


def phantom_volume(size: int = 64, seed: int = 0, spacing: float = 1.0) -> Volume:
    """Isotropic phantom volume built from smoothly varying nested ellipsoids."""
    rng = np.random.default_rng(seed)
    zz, yy, xx = np.mgrid[0:size, 0:size, 0:size].astype(np.float64)
    center = (size - 1) / 2.0
    vox = np.zeros((size, size, size), dtype=np.float64)

    radii = np.array([rng.uniform(0.3, 0.42) * size for _ in range(3)])
    head = (((zz - center) / radii[0]) ** 2 + ((yy - center) / radii[1]) ** 2
            + ((xx - center) / radii[2]) ** 2) <= 1.0
    vox[head] = rng.uniform(0.35, 0.55)

    for _ in range(int(rng.integers(6, 12))):
        c = center + rng.uniform(-0.2, 0.2, size=3) * size
        r = rng.uniform(0.04, 0.16, size=3) * size
        blob = (((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2
                + ((xx - c[2]) / r[2]) ** 2) <= 1.0
        blob &= head
        vox[blob] = np.clip(vox[blob] + rng.uniform(-0.35, 0.5), 0.02, 1.0)

    return Volume(voxels=vox, spacing=(spacing,) * 3)
