"""Volume container: rank-3 intensities plus geometry metadata."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nifti

PLANES = ("sagittal", "coronal", "axial")


class DataError(ValueError):
    """Raised for unusable input data (bad volumes, degenerate intensities)."""


@dataclass
class AcquisitionSpec:
    """Anisotropic 2D acquisition geometry: slice thickness t, gap g.

    The super-resolution factor is k = (t + g) / in-plane spacing and must
    be an integer >= 2.
    """

    thickness: float
    gap: float
    through_plane_axis: int
    in_plane_spacing: float = 1.0

    def __post_init__(self):
        if self.thickness <= 0:
            raise ValueError(f"thickness must be > 0, got {self.thickness}")
        if self.gap < 0:
            raise ValueError(f"gap must be >= 0, got {self.gap}")
        if self.through_plane_axis not in (0, 1, 2):
            raise ValueError(f"through_plane_axis must be in 0..2, got {self.through_plane_axis}")
        ratio = (self.thickness + self.gap) / self.in_plane_spacing
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(
                f"(t + g) / spacing = {ratio} is not an integer; "
                "only integer SR factors are supported")
        if round(ratio) < 2:
            raise ValueError(f"SR factor k = {ratio:g} must be >= 2")

    @property
    def k(self) -> int:
        return int(round((self.thickness + self.gap) / self.in_plane_spacing))


def _orientation_from_affine(affine) -> tuple:
    """Label each voxel axis with the plane its slices lie in.

    An axis whose world direction is dominantly left-right indexes sagittal
    slices, anterior-posterior coronal, superior-inferior axial.
    """
    rot = np.asarray(affine, dtype=np.float64)[:3, :3]
    labels = []
    for j in range(3):
        col = rot[:, j]
        if not np.any(col != 0):
            raise DataError("degenerate affine: zero direction column")
        labels.append(PLANES[int(np.argmax(np.abs(col)))])
    if sorted(labels) != sorted(PLANES):
        raise DataError(f"ambiguous volume orientation {labels}")
    return tuple(labels)


@dataclass
class Volume:
    """A 3D intensity grid with per-axis spacing and orientation labels."""

    voxels: np.ndarray
    spacing: tuple
    orientation: tuple = ("sagittal", "coronal", "axial")
    acquisition: Optional[AcquisitionSpec] = None
    affine: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise DataError(f"volume must be rank 3, got rank {self.voxels.ndim}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacings must be three positive numbers, got {self.spacing}")
        if sorted(self.orientation) != sorted(PLANES):
            raise DataError(f"orientation must be a permutation of {PLANES}")

    @property
    def shape(self):
        return self.voxels.shape

    def axis_for_plane(self, plane: str) -> int:
        """Array axis along which slices of the given plane are stacked."""
        if plane not in PLANES:
            raise ValueError(f"unknown plane {plane!r}")
        return self.orientation.index(plane)

    def anisotropic_axes(self, rel_tol: float = 1e-6):
        """Axes whose spacing exceeds the finest spacing of the volume."""
        finest = min(self.spacing)
        return tuple(i for i, s in enumerate(self.spacing)
                     if s > finest * (1 + rel_tol))

    def with_voxels(self, voxels, spacing=None, acquisition="keep") -> "Volume":
        acq = self.acquisition if acquisition == "keep" else acquisition
        return replace(self, voxels=voxels,
                       spacing=self.spacing if spacing is None else spacing,
                       acquisition=acq)


def load_volume(path) -> Volume:
    """Read a NIfTI-1 volume, keeping intensities in native units."""
    voxels, spacing, affine = nifti.read(path)
    try:
        orientation = _orientation_from_affine(affine)
    except DataError:
        orientation = ("sagittal", "coronal", "axial")
    return Volume(voxels=voxels, spacing=tuple(spacing),
                  orientation=orientation, affine=affine)


def save_volume(path, vol: Volume, dtype=np.float32):
    affine = vol.affine
    if affine is not None:
        # rescale direction columns if spacing changed since load
        affine = np.array(affine, dtype=np.float64)
        for j in range(3):
            norm = np.linalg.norm(affine[:3, j])
            if norm > 0:
                affine[:3, j] *= vol.spacing[j] / norm
    nifti.write(path, vol.voxels, vol.spacing, affine=affine, dtype=dtype)
