"""Voxel grids and NIfTI-1 input/output.

A :class:`VoxelGrid` couples a 3D sample array with its voxel spacing and
the 4x4 affine that maps voxel indices ``(i, j, k)`` to world millimetres.
Samples are kept in x-fastest (Fortran) memory order, matching the NIfTI
on-disk layout, and are always indexed ``samples[i, j, k]``.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import BoundsError, FormatError, ParameterError, UnsupportedError

__all__ = [
    "VoxelGrid",
    "BoundingBox",
    "UNITS",
    "read_nifti",
    "write_nifti",
    "world_of",
]

UNITS = ("HU", "probability", "binary")

# NIfTI datatype code -> numpy dtype (little-endian base, byte order fixed on read)
_NIFTI_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_HEADER_SIZE = 348
_VOX_OFFSET = 352
_UNIT_TAG = "aerotree:"

Index = Tuple[int, int, int]


def _spacing_of(affine: np.ndarray) -> np.ndarray:
    return np.linalg.norm(affine[:3, :3], axis=0)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Dense scalar volume with physical geometry.

    Parameters
    ----------
    samples : ndarray, shape (nx, ny, nz)
        ``uint8`` for binary masks, ``float32`` otherwise.
    spacing : (sx, sy, sz)
        Voxel size in millimetres. Defaults to the affine column norms.
    affine : (4, 4) ndarray
        Voxel index to world (mm) transform. Defaults to ``diag(spacing)``.
    unit : {"HU", "probability", "binary"}
    """

    samples: np.ndarray
    spacing: Tuple[float, float, float] = None
    affine: np.ndarray = None
    unit: str = "HU"

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 3:
            raise ParameterError(f"samples must be 3D, got shape {samples.shape}")
        if min(samples.shape) < 1:
            raise ParameterError(f"dims must be positive, got {samples.shape}")
        if self.unit not in UNITS:
            raise ParameterError(f"unknown unit tag {self.unit!r}")

        if self.unit == "binary":
            if samples.dtype != np.uint8:
                if samples.dtype != bool and not np.isin(samples, (0, 1)).all():
                    raise ParameterError("binary grid contains values outside {0, 1}")
                samples = samples.astype(np.uint8)
            elif samples.size and samples.max() > 1:
                raise ParameterError("binary grid contains values outside {0, 1}")
        else:
            if samples.dtype != np.float32:
                samples = samples.astype(np.float32)
            if self.unit == "probability" and samples.size:
                lo, hi = float(samples.min()), float(samples.max())
                if lo < 0.0 or hi > 1.0 or np.isnan(lo) or np.isnan(hi):
                    raise ParameterError(
                        f"probability grid has values outside [0, 1]: [{lo}, {hi}]"
                    )
        samples = np.asfortranarray(samples).view()
        samples.flags.writeable = False

        if self.affine is None:
            if self.spacing is None:
                spacing = np.ones(3)
            else:
                spacing = np.asarray(self.spacing, dtype=float)
            affine = np.diag([*spacing, 1.0])
        else:
            affine = np.array(self.affine, dtype=float)
            if affine.shape != (4, 4):
                raise ParameterError(f"affine must be 4x4, got {affine.shape}")
            spacing = (
                _spacing_of(affine)
                if self.spacing is None
                else np.asarray(self.spacing, dtype=float)
            )
        if spacing.shape != (3,) or not np.all(spacing > 0):
            raise ParameterError(f"spacing must be three positive values, got {spacing}")
        if not np.allclose(_spacing_of(affine), spacing, rtol=0, atol=1e-3):
            raise ParameterError(
                f"spacing {tuple(spacing)} disagrees with affine column norms "
                f"{tuple(_spacing_of(affine))}"
            )
        affine.flags.writeable = False

        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> Index:
        return tuple(int(n) for n in self.samples.shape)

    @property
    def is_binary(self) -> bool:
        return self.unit == "binary"

    def with_samples(self, samples: np.ndarray, unit: str | None = None) -> "VoxelGrid":
        """Same geometry, new samples (and optionally a new unit tag)."""
        return VoxelGrid(samples, self.spacing, self.affine, unit or self.unit)

    def same_geometry(self, other: "VoxelGrid", atol: float = 1e-3) -> bool:
        return self.dims == other.dims and np.allclose(
            self.spacing, other.spacing, rtol=0, atol=atol
        )

    def superior_axis(self) -> Tuple[int, int]:
        """Voxel axis pointing most along world z, and its sign (+1 / -1)."""
        zrow = self.affine[2, :3]
        axis = int(np.argmax(np.abs(zrow)))
        return axis, 1 if zrow[axis] > 0 else -1

    def __repr__(self):
        return (
            f"VoxelGrid(dims={self.dims}, spacing={self.spacing}, "
            f"unit={self.unit!r}, dtype={self.samples.dtype})"
        )


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned voxel box; both corners are inclusive."""

    min: Index
    max: Index

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min)
        hi = tuple(int(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise ParameterError("bounding box corners must be 3D")
        if any(a > b for a, b in zip(lo, hi)):
            raise ParameterError(f"bounding box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def shape(self) -> Index:
        return tuple(b - a + 1 for a, b in zip(self.min, self.max))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.min, self.max))

    def inside(self, dims: Sequence[int]) -> bool:
        return all(0 <= a and b < n for a, b, n in zip(self.min, self.max, dims))


def world_of(grid: VoxelGrid, index: Sequence[int]) -> Tuple[float, float, float]:
    """World position (mm) of a voxel index."""
    idx = tuple(int(v) for v in index)
    if len(idx) != 3 or not all(0 <= v < n for v, n in zip(idx, grid.dims)):
        raise BoundsError(f"index {index} outside grid dims {grid.dims}")
    xyz = grid.affine @ np.array([*idx, 1.0])
    return tuple(float(v) for v in xyz[:3])


# ---------------------------------------------------------------------------
# NIfTI-1


def _quaternion_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    zooms = np.abs(np.array(hdr["pixdim"][1:4], dtype=float))
    zooms[2] *= qfac
    affine = np.eye(4)
    affine[:3, :3] = rot * zooms
    affine[:3, 3] = hdr["qoffset"]
    return affine


def _parse_header(raw: bytes) -> dict:
    if len(raw) < _HEADER_SIZE:
        raise FormatError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"bad NIfTI magic {magic!r}")
    endian = "<"
    if struct.unpack("<i", raw[:4])[0] != _HEADER_SIZE:
        endian = ">"
        if struct.unpack(">i", raw[:4])[0] != _HEADER_SIZE:
            raise FormatError("sizeof_hdr is not 348 in either byte order")

    def unpack(fmt, offset):
        return struct.unpack_from(endian + fmt, raw, offset)

    descrip = raw[148:228].split(b"\x00", 1)[0].decode("latin-1")
    return {
        "endian": endian,
        "magic": magic,
        "dim": unpack("8h", 40),
        "datatype": unpack("h", 70)[0],
        "pixdim": unpack("8f", 76),
        "vox_offset": unpack("f", 108)[0],
        "scl_slope": unpack("f", 112)[0],
        "scl_inter": unpack("f", 116)[0],
        "descrip": descrip,
        "qform_code": unpack("h", 252)[0],
        "sform_code": unpack("h", 254)[0],
        "quatern": unpack("3f", 256),
        "qoffset": unpack("3f", 268),
        "srow": np.array(unpack("12f", 280), dtype=float).reshape(3, 4),
    }


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path, unit: str | None = None) -> VoxelGrid:
    """Load a NIfTI-1 volume.

    Compression is detected from the gzip magic bytes, not the file
    extension. The affine comes from the sform when its code is nonzero,
    else the qform, else ``diag(pixdim)``. Nonzero ``scl_slope`` is applied.

    When `unit` is omitted, the tag stored by :func:`write_nifti` is used if
    present; otherwise uint8 data holding only 0/1 is ``binary``, floating
    data inside [0, 1] is ``probability`` and anything else is ``HU``.
    """
    raw = _read_bytes(path)
    hdr = _parse_header(raw)

    dim = hdr["dim"]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"invalid dim[0] = {ndim}")
    if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedError(f"volumes with more than 3 dimensions: dim = {dim}")
    shape = tuple(dim[i] if i <= ndim and dim[i] > 0 else 1 for i in (1, 2, 3))

    code = hdr["datatype"]
    if code not in _NIFTI_DTYPES:
        raise UnsupportedError(f"unsupported NIfTI datatype code {code}")
    dtype = _NIFTI_DTYPES[code].newbyteorder(hdr["endian"])

    count = int(np.prod(shape))
    if hdr["magic"] == b"ni1\x00":
        img_path = str(path)
        for ext in (".hdr.gz", ".hdr"):
            if img_path.endswith(ext):
                img_path = img_path[: -len(ext)] + ".img"
                break
        data_raw, offset = _read_bytes(img_path), int(hdr["vox_offset"])
    else:
        data_raw, offset = raw, int(hdr["vox_offset"]) or _VOX_OFFSET
    if len(data_raw) < offset + count * dtype.itemsize:
        raise FormatError("file truncated: not enough voxel data")
    data = np.frombuffer(data_raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0):
        data = (data.astype(np.float64) * slope + inter).astype(np.float32)

    if hdr["sform_code"] > 0:
        affine = np.vstack([hdr["srow"], [0, 0, 0, 1]])
    elif hdr["qform_code"] > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag([*np.abs(hdr["pixdim"][1:4]), 1.0])
    spacing = np.abs(np.array(hdr["pixdim"][1:4], dtype=float))
    if not np.allclose(_spacing_of(affine), spacing, rtol=0, atol=1e-3):
        raise FormatError(
            f"pixdim {tuple(spacing)} inconsistent with affine column norms "
            f"{tuple(_spacing_of(affine))}"
        )

    if unit is None:
        tag = hdr["descrip"]
        if tag.startswith(_UNIT_TAG) and tag[len(_UNIT_TAG):] in UNITS:
            unit = tag[len(_UNIT_TAG):]
        else:
            unit = _guess_unit(data)
    return VoxelGrid(data, spacing, affine, unit)


def _guess_unit(data: np.ndarray) -> str:
    if data.size == 0:
        return "HU"
    lo, hi = data.min(), data.max()
    if data.dtype == np.uint8 and hi <= 1:
        return "binary"
    if data.dtype.kind == "f" and lo >= 0 and hi <= 1:
        return "probability"
    return "HU"


def _build_header(grid: VoxelGrid, code: int, bitpix: int) -> bytes:
    hdr = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *grid.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *grid.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 0.0, 0.0)
    hdr[123] = 2  # xyzt_units: millimetres
    descrip = (_UNIT_TAG + grid.unit).encode("ascii")
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<hh", hdr, 252, 0, 1)
    struct.pack_into("<12f", hdr, 280, *grid.affine[:3, :].ravel())
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(grid: VoxelGrid, path) -> None:
    """Save `grid` as single-file NIfTI-1; gzip when `path` ends in ``.gz``.

    Binary grids are stored as uint8 (code 2), everything else as float32
    (code 16). Output bytes depend only on the grid, so rewriting the same
    grid reproduces the same file.
    """
    if grid.is_binary:
        data, code, bitpix = grid.samples.astype("<u1"), 2, 8
    else:
        data, code, bitpix = grid.samples.astype("<f4"), 16, 32
    payload = (
        _build_header(grid, code, bitpix)
        + b"\x00" * (_VOX_OFFSET - _HEADER_SIZE)
        + data.tobytes(order="F")
    )
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(payload)
