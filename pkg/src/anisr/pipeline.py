"""Slice-level data pipeline: normalization, padding, extraction, pairs.

Conventions pinned here and relied on everywhere else:

* Intensities are rescaled by the LR min/max only; HR values may leave
  [0, 1] and are never clamped.
* Reflect padding never duplicates the edge sample and is exactly
  invertible via the stored PadRecord.
* The conditioning image U(x) is always ``upsample(lr, k, aniso_axis)``
  (single source of truth), trailing-cropped to the HR length when the HR
  extent is not a multiple of k.
* Augmentation transforms HR and re-degrades to get LR, keeping pairs
  physically consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .degrade import degrade_axis, upsample
from .profiles import SliceProfile
from .volume import AcquisitionSpec, DataError, Volume

AUGMENT_POLICIES = ("none", "flip", "full")


@dataclass(frozen=True)
class NormalizationRecord:
    lr_min: float
    lr_max: float

    def __post_init__(self):
        if not self.lr_max > self.lr_min:
            raise DataError(
                f"degenerate normalization: lr_max ({self.lr_max}) must exceed "
                f"lr_min ({self.lr_min})")

    def apply(self, arr):
        return (np.asarray(arr, dtype=np.float64) - self.lr_min) / (self.lr_max - self.lr_min)

    def invert(self, arr):
        return np.asarray(arr, dtype=np.float64) * (self.lr_max - self.lr_min) + self.lr_min


def normalize_pair(hr, lr):
    """Map both images by the LR min/max; LR lands in [0, 1], HR may not."""
    lr = np.asarray(lr, dtype=np.float64)
    record = NormalizationRecord(float(lr.min()), float(lr.max()))
    return record.apply(hr), record.apply(lr), record


@dataclass(frozen=True)
class PadRecord:
    pad_width: tuple  # ((before, after), ...) per axis
    original_shape: tuple

    def unpad(self, arr):
        arr = np.asarray(arr)
        sl = tuple(slice(b, arr.shape[i] - a if a else None)
                   for i, (b, a) in enumerate(self.pad_width))
        return arr[sl]


def pad_reflect(img, multiple: int):
    """Reflect-pad each axis up to the next multiple (edge not duplicated).

    Padding is split as evenly as possible with the extra sample on the
    trailing edge.
    """
    img = np.asarray(img)
    if multiple < 1:
        raise ValueError(f"pad multiple must be >= 1, got {multiple}")
    if any(n < 2 for n in img.shape):
        raise DataError(f"image too small to pad: shape {img.shape}")
    widths = []
    for n in img.shape:
        total = (-n) % multiple
        before, after = total // 2, total - total // 2
        if max(before, after) > n - 1:
            raise DataError(
                f"axis of length {n} too small for reflect padding to a "
                f"multiple of {multiple}")
        widths.append((before, after))
    record = PadRecord(tuple(widths), img.shape)
    if all(w == (0, 0) for w in widths):
        return img.copy(), record
    return np.pad(img, widths, mode="reflect"), record


def extract_slices(vol: Volume, through_plane_axis: int):
    """2D slice stacks from the two planes that contain the through-plane axis.

    Returns ``{plane_name: (slices, fixed_axis, in_slice_aniso_axis)}`` where
    ``slices`` is a list in ascending index order. Stacking ``slices`` along
    ``fixed_axis`` reproduces the volume bit-exactly.
    """
    if through_plane_axis not in (0, 1, 2):
        raise ValueError(f"through_plane_axis must be in 0..2, got {through_plane_axis}")
    stacks = {}
    for fixed_axis in range(3):
        if fixed_axis == through_plane_axis:
            continue
        remaining = [a for a in range(3) if a != fixed_axis]
        aniso = remaining.index(through_plane_axis)
        slices = [np.take(vol.voxels, i, axis=fixed_axis)
                  for i in range(vol.shape[fixed_axis])]
        stacks[vol.orientation[fixed_axis]] = (slices, fixed_axis, aniso)
    return stacks


def restack(slices, fixed_axis: int) -> np.ndarray:
    return np.stack(slices, axis=fixed_axis)


@dataclass
class SlicePair:
    """Aligned HR / LR / upsampled-LR 2D slices in normalized intensity."""

    hr: np.ndarray
    lr: np.ndarray
    up_lr: np.ndarray
    orientation: str
    aniso_axis: int
    k: int
    norm: NormalizationRecord
    pad: Optional[PadRecord] = None
    crop: int = 0  # trailing up_lr samples dropped to match the HR length

    def validate(self):
        if self.hr.shape != self.up_lr.shape:
            raise DataError(
                f"hr {self.hr.shape} and up_lr {self.up_lr.shape} differ")
        expected = self.k * self.lr.shape[self.aniso_axis] - self.crop
        if self.hr.shape[self.aniso_axis] != expected:
            raise DataError(
                f"hr length {self.hr.shape[self.aniso_axis]} along the aniso axis "
                f"is inconsistent with k={self.k}, lr length "
                f"{self.lr.shape[self.aniso_axis]}, crop {self.crop}")
        return self


def make_pair(hr_slice, lr_slice, k: int, aniso_axis: int,
              orientation: str = "unknown", norm: Optional[NormalizationRecord] = None) -> SlicePair:
    """Assemble a normalized SlicePair from native-unit HR and LR slices.

    When ``norm`` is given (volume-level record) it is used as-is; otherwise
    a per-slice record is computed from the LR slice.
    """
    hr_slice = np.asarray(hr_slice, dtype=np.float64)
    lr_slice = np.asarray(lr_slice, dtype=np.float64)
    if norm is None:
        hr_n, lr_n, norm = normalize_pair(hr_slice, lr_slice)
    else:
        hr_n, lr_n = norm.apply(hr_slice), norm.apply(lr_slice)
    up = upsample(lr_n, k, aniso_axis)
    crop = up.shape[aniso_axis] - hr_n.shape[aniso_axis]
    if crop < 0 or crop >= k:
        raise DataError(
            f"hr length {hr_n.shape[aniso_axis]} and lr length "
            f"{lr_n.shape[aniso_axis]} are not consistent with k={k}")
    if crop:
        sl = [slice(None)] * up.ndim
        sl[aniso_axis] = slice(0, up.shape[aniso_axis] - crop)
        up = up[tuple(sl)]
    return SlicePair(hr=hr_n, lr=lr_n, up_lr=up, orientation=orientation,
                     aniso_axis=aniso_axis, k=k, norm=norm, crop=crop).validate()


def slice_has_content(hr_slice, min_nonzero_frac: float = 0.01) -> bool:
    """Default evaluation-slice rule: at least 1% of voxels are nonzero."""
    hr_slice = np.asarray(hr_slice)
    return np.count_nonzero(hr_slice) >= min_nonzero_frac * hr_slice.size


@dataclass
class SpatialTransform:
    """In-plane warp parameters: affine about the center plus an elastic field."""

    angle_deg: float = 0.0
    scale: float = 1.0
    shear_deg: float = 0.0
    flip_axes: tuple = ()
    displacement: Optional[np.ndarray] = None  # (2, gh, gw) control-point grid, px

    @classmethod
    def identity(cls):
        return cls()

    def is_identity(self):
        return (self.angle_deg == 0.0 and self.scale == 1.0 and self.shear_deg == 0.0
                and not self.flip_axes and self.displacement is None)


def _draw_transform(policy: str, rng: np.random.Generator,
                    elastic_grid: int = 4, elastic_max_px: float = 4.0) -> SpatialTransform:
    if policy == "none":
        return SpatialTransform.identity()
    flips = tuple(ax for ax in (0, 1) if rng.random() < 0.5)
    if policy == "flip":
        return SpatialTransform(flip_axes=flips)
    return SpatialTransform(
        angle_deg=float(rng.uniform(-10.0, 10.0)),
        scale=float(rng.uniform(0.9, 1.1)),
        shear_deg=float(rng.uniform(-5.0, 5.0)),
        flip_axes=flips,
        displacement=rng.uniform(-elastic_max_px, elastic_max_px,
                                 size=(2, elastic_grid, elastic_grid)),
    )


def apply_spatial_transform(img, t: SpatialTransform):
    """Warp a 2D image (cubic interpolation, mirror boundary)."""
    img = np.asarray(img, dtype=np.float64)
    if t.is_identity():
        return img.copy()
    out = img
    for ax in t.flip_axes:
        out = np.flip(out, axis=ax)
    if t.angle_deg == 0.0 and t.scale == 1.0 and t.shear_deg == 0.0 and t.displacement is None:
        return np.ascontiguousarray(out)

    h, w = out.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(t.angle_deg)
    sh = np.tan(np.deg2rad(t.shear_deg))
    # output -> input mapping: inverse of scale * rot * shear about the center
    fwd = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]]) @ np.array([[1.0, sh], [0.0, 1.0]])
    inv = np.linalg.inv(t.scale * fwd)
    dy, dx = yy - cy, xx - cx
    src_y = inv[0, 0] * dy + inv[0, 1] * dx + cy
    src_x = inv[1, 0] * dy + inv[1, 1] * dx + cx
    if t.displacement is not None:
        field = np.stack([
            ndimage.zoom(t.displacement[i], (h / t.displacement.shape[1],
                                             w / t.displacement.shape[2]), order=3)
            for i in range(2)])
        src_y = src_y + field[0]
        src_x = src_x + field[1]
    return ndimage.map_coordinates(out, [src_y, src_x], order=3, mode="mirror")


class SlicePairFactory:
    """Builds and augments physically consistent HR/LR slice pairs."""

    def __init__(self, profile: SliceProfile, k: int):
        self.profile = profile
        self.k = k

    def from_hr(self, hr_slice, aniso_axis: int, orientation: str = "unknown",
                norm: Optional[NormalizationRecord] = None) -> SlicePair:
        hr_slice = np.asarray(hr_slice, dtype=np.float64)
        lr = degrade_axis(hr_slice, self.profile.kernel, self.k, aniso_axis)
        return make_pair(hr_slice, lr, self.k, aniso_axis, orientation, norm=norm)

    def augment(self, pair: SlicePair, policy: str, rng: np.random.Generator) -> SlicePair:
        """Warp HR, re-degrade for LR, recompute U(x). Keeps the pair's record."""
        if policy not in AUGMENT_POLICIES:
            raise ValueError(f"unknown augmentation policy {policy!r}")
        transform = _draw_transform(policy, rng)
        return self.augment_with(pair, transform)

    def augment_with(self, pair: SlicePair, transform: SpatialTransform) -> SlicePair:
        if transform.is_identity():
            return pair
        hr_aug = apply_spatial_transform(pair.hr, transform)
        lr_aug = degrade_axis(hr_aug, self.profile.kernel, self.k, pair.aniso_axis)
        up = upsample(lr_aug, self.k, pair.aniso_axis)
        if pair.crop:
            sl = [slice(None)] * up.ndim
            sl[pair.aniso_axis] = slice(0, up.shape[pair.aniso_axis] - pair.crop)
            up = up[tuple(sl)]
        return replace(pair, hr=hr_aug, lr=lr_aug, up_lr=up).validate()
