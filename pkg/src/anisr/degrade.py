"""Anisotropic acquisition simulation and cubic upsampling.

Low-resolution volumes are produced by convolving the through-plane axis
with a slice profile (mirror boundary, edge sample not duplicated) and
subsampling at stride k starting from index 0. The inverse geometric
operation is interpolating cubic upsampling with knots pinned exactly.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d, spline_filter1d

from .profiles import SliceProfile
from .volume import AcquisitionSpec, DataError, Volume


def lr_length(n_hr: int, k: int) -> int:
    """Through-plane sample count after degradation: floor((N-1)/k) + 1."""
    return (n_hr - 1) // k + 1


def degrade_axis(arr: np.ndarray, kernel: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Profile-weighted average at stride-k centers 0, k, 2k, ... (mirror edges)."""
    arr = np.asarray(arr, dtype=np.float64)
    blurred = convolve1d(arr, kernel, axis=axis, mode="mirror")
    sl = [slice(None)] * arr.ndim
    sl[axis] = slice(0, None, k)
    return blurred[tuple(sl)]


def degrade_volume(vol: Volume, profile: SliceProfile, spec: AcquisitionSpec) -> Volume:
    """Simulate an anisotropic 2D acquisition of an isotropic volume."""
    axis = spec.through_plane_axis
    spacings = np.asarray(vol.spacing)
    if not np.allclose(spacings, spacings[0], rtol=1e-6):
        raise DataError(
            f"degradation needs an isotropic input volume, got spacing {vol.spacing}")
    if abs(spec.in_plane_spacing - spacings[0]) > 1e-9 * max(1.0, spacings[0]):
        raise DataError(
            f"acquisition spec assumes {spec.in_plane_spacing} mm spacing but the "
            f"volume is at {spacings[0]} mm")
    if abs(profile.spacing_mm - spacings[0]) > 1e-9 * max(1.0, spacings[0]):
        raise DataError(
            f"slice profile was designed for {profile.spacing_mm} mm spacing but the "
            f"volume is at {spacings[0]} mm")

    lr = degrade_axis(vol.voxels, profile.kernel, spec.k, axis)
    new_spacing = list(vol.spacing)
    new_spacing[axis] = spec.thickness + spec.gap
    return vol.with_voxels(lr, spacing=tuple(new_spacing), acquisition=spec)


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Fold indices into [0, n) by mirroring without duplicating the edge."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _bspline3(u: np.ndarray) -> np.ndarray:
    au = np.abs(u)
    out = np.zeros_like(au)
    near = au < 1.0
    far = (au >= 1.0) & (au < 2.0)
    out[near] = (4.0 - 6.0 * au[near] ** 2 + 3.0 * au[near] ** 3) / 6.0
    out[far] = (2.0 - au[far]) ** 3 / 6.0
    return out


def upsample(img: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Interpolating cubic-spline upsample by an integer factor along one axis.

    Output positions j map to input coordinates j / k, so every input sample
    reappears bit-exactly at output index j * k; the (k - 1) positions past
    the last knot are mirror-extrapolated. k = 1 returns a copy.
    """
    img = np.asarray(img, dtype=np.float64)
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ValueError(f"upsampling factor must be an integer >= 1, got {k}")
    if not -img.ndim <= axis < img.ndim:
        raise ValueError(f"axis {axis} out of range for rank-{img.ndim} input")
    axis = axis % img.ndim
    if k == 1:
        return img.copy()

    n = img.shape[axis]
    coeffs = spline_filter1d(img, order=3, axis=axis, mode="mirror")
    pos = np.arange(k * n, dtype=np.float64) / k
    base = np.floor(pos).astype(np.intp)
    frac = pos - base

    bshape = [1] * img.ndim
    bshape[axis] = k * n
    out_shape = list(img.shape)
    out_shape[axis] = k * n
    out = np.zeros(out_shape, dtype=np.float64)
    for offset in (-1, 0, 1, 2):
        idx = _mirror_index(base + offset, n)
        weights = _bspline3(frac - offset).reshape(bshape)
        out += weights * np.take(coeffs, idx, axis=axis)

    knots = [slice(None)] * img.ndim
    knots[axis] = slice(0, k * n, k)
    out[tuple(knots)] = img
    return out


def upsample_volume(vol: Volume, k: int, axis: int) -> Volume:
    up = upsample(vol.voxels, k, axis)
    new_spacing = list(vol.spacing)
    new_spacing[axis] = vol.spacing[axis] / k
    return vol.with_voxels(up, spacing=tuple(new_spacing), acquisition=None)
