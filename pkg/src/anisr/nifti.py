"""Minimal NIfTI-1 volume I/O (.nii / .nii.gz).

Supports the single-file variant only: a 348-byte header followed by the
voxel payload at ``vox_offset``. Covers the integer and floating dtypes that
occur in anatomical MR exports, applies scl_slope/scl_inter on read, and
reconstructs the affine from sform, qform, or pixdim (in that order of
preference).
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

# header offsets (NIfTI-1)
_HDR_SIZE = 348
_MAGIC_OFFSET = 344

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiError(IOError):
    """Raised for unreadable or unsupported NIfTI files."""


def _open(path, mode="rb"):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def _unpack(fmt, buf, offset, swap):
    prefix = ">" if swap else "<"
    return struct.unpack_from(prefix + fmt, buf, offset)


def read(path):
    """Read a NIfTI-1 file.

    Returns ``(voxels, spacing, affine)`` where voxels is a rank-3 float
    array (scanner-unit intensities, slope/intercept applied), spacing is
    the (3,) voxel size in mm, and affine is the 4x4 voxel-to-world matrix.
    """
    path = Path(path)
    if not path.exists():
        raise NiftiError(f"no such file: {path}")
    try:
        with _open(path) as f:
            hdr = f.read(_HDR_SIZE)
            if len(hdr) < _HDR_SIZE:
                raise NiftiError(f"{path}: truncated header")
            (sizeof_hdr,) = struct.unpack_from("<i", hdr, 0)
            swap = sizeof_hdr != _HDR_SIZE
            if swap:
                (sizeof_hdr,) = struct.unpack_from(">i", hdr, 0)
                if sizeof_hdr != _HDR_SIZE:
                    raise NiftiError(f"{path}: not a NIfTI-1 file")
            magic = hdr[_MAGIC_OFFSET:_MAGIC_OFFSET + 4]
            if magic[:3] not in (b"n+1", b"ni1"):
                raise NiftiError(f"{path}: bad magic {magic!r}")
            if magic[:3] == b"ni1":
                raise NiftiError(f"{path}: two-file (.hdr/.img) NIfTI not supported")

            dim = _unpack("8h", hdr, 40, swap)
            (datatype,) = _unpack("h", hdr, 70, swap)
            pixdim = _unpack("8f", hdr, 76, swap)
            (vox_offset,) = _unpack("f", hdr, 108, swap)
            scl_slope, scl_inter = _unpack("2f", hdr, 112, swap)
            qform_code, sform_code = _unpack("2h", hdr, 252, swap)

            ndim = dim[0]
            if ndim < 3:
                raise NiftiError(f"{path}: non-3D payload (dim[0]={ndim})")
            shape = dim[1:1 + ndim]
            if any(n > 1 for n in shape[3:]):
                raise NiftiError(
                    f"{path}: non-3D payload (shape {tuple(shape)})")
            shape = tuple(int(n) for n in shape[:3])

            if datatype not in _DTYPES:
                raise NiftiError(f"{path}: unsupported datatype code {datatype}")
            dtype = np.dtype(_DTYPES[datatype])
            if swap:
                dtype = dtype.newbyteorder(">")

            f.seek(int(vox_offset))
            count = int(np.prod(shape))
            raw = f.read(count * dtype.itemsize)
            if len(raw) < count * dtype.itemsize:
                raise NiftiError(f"{path}: truncated voxel payload")
            data = np.frombuffer(raw, dtype=dtype, count=count)
            # NIfTI stores the first axis fastest
            voxels = data.reshape(shape, order="F").astype(np.float64)
    except OSError as exc:
        raise NiftiError(f"{path}: {exc}") from exc

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        voxels = voxels * slope + scl_inter

    spacing = np.abs(np.asarray(pixdim[1:4], dtype=np.float64))
    if np.any(spacing <= 0):
        raise NiftiError(f"{path}: missing or non-positive spacing {tuple(spacing)}")

    affine = _read_affine(hdr, swap, sform_code, qform_code, pixdim)
    return voxels, spacing, affine


def _read_affine(hdr, swap, sform_code, qform_code, pixdim):
    if sform_code > 0:
        rows = [_unpack("4f", hdr, off, swap) for off in (280, 296, 312)]
        affine = np.eye(4)
        affine[:3, :] = np.asarray(rows, dtype=np.float64)
        return affine
    if qform_code > 0:
        b, c, d = _unpack("3f", hdr, 256, swap)
        ox, oy, oz = _unpack("3f", hdr, 268, swap)
        a2 = 1.0 - (b * b + c * c + d * d)
        a = np.sqrt(max(a2, 0.0))
        rot = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ])
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        scales = np.array([abs(pixdim[1]), abs(pixdim[2]), qfac * abs(pixdim[3])])
        affine = np.eye(4)
        affine[:3, :3] = rot * scales[None, :]
        affine[:3, 3] = (ox, oy, oz)
        return affine
    affine = np.diag([abs(pixdim[1]), abs(pixdim[2]), abs(pixdim[3]), 1.0])
    return affine


def write(path, voxels, spacing, affine=None, dtype=np.float32):
    """Write a rank-3 array as a single-file NIfTI-1 volume."""
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise NiftiError(f"can only write rank-3 volumes, got rank {voxels.ndim}")
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise NiftiError(f"bad spacing {spacing}")
    dtype = np.dtype(dtype)
    if dtype not in _DTYPE_CODES:
        raise NiftiError(f"unsupported output dtype {dtype}")
    if affine is None:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *voxels.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _DTYPE_CODES[dtype])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # slope/inter
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<4f", hdr, 280, *affine[0, :])
    struct.pack_into("<4f", hdr, 296, *affine[1, :])
    struct.pack_into("<4f", hdr, 312, *affine[2, :])
    hdr[_MAGIC_OFFSET:_MAGIC_OFFSET + 4] = b"n+1\x00"

    payload = np.asfortranarray(voxels.astype(dtype)).tobytes(order="F")
    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)  # pad to vox_offset 352
        f.write(payload)
