"""CT preparation: isotropic resampling, lung cropping, intensity scaling.

The default chain mirrors the training-time preprocessing of the airway
models: resample to 0.75 mm isotropic with order-one (trilinear)
interpolation, crop to the tightest box around the lungs, then clip to
[-1024, 1024] HU and rescale to [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import BoundsError, EmptyMaskError, ParameterError, ShapeError
from .volume import BoundingBox, VoxelGrid

__all__ = [
    "PreprocessParams",
    "resample_isotropic",
    "clip_normalize",
    "lung_bbox",
    "crop",
    "clip_trachea_at_lung_top",
]


@dataclass(frozen=True)
class PreprocessParams:
    target_spacing: float = 0.75
    clip_low: float = -1024.0
    clip_high: float = 1024.0
    crop_margin: int = 0

    def __post_init__(self):
        if not self.target_spacing > 0:
            raise ParameterError(f"target_spacing must be > 0, got {self.target_spacing}")
        if not self.clip_low < self.clip_high:
            raise ParameterError(
                f"clip_low ({self.clip_low}) must be below clip_high ({self.clip_high})"
            )
        if self.crop_margin < 0:
            raise ParameterError(f"crop_margin must be >= 0, got {self.crop_margin}")


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def resample_isotropic(
    grid: VoxelGrid, target: float = 0.75, mode: str = "trilinear"
) -> VoxelGrid:
    """Resample `grid` onto a ``target`` mm isotropic lattice.

    The first voxel keeps its world position; output voxel ``o`` samples the
    input at continuous index ``o * target / spacing``. Samples past the last
    input voxel take the edge value. ``mode="nearest"`` is required for
    binary masks and returns a binary grid.
    """
    if not target > 0:
        raise ParameterError(f"target spacing must be > 0, got {target}")
    if mode not in ("trilinear", "nearest"):
        raise ParameterError(f"unknown resampling mode {mode!r}")
    if grid.is_binary and mode != "nearest":
        raise ParameterError("binary masks must be resampled with mode='nearest'")

    spacing = np.asarray(grid.spacing)
    out_dims = tuple(
        max(1, _round_half_away(n * s / target)) for n, s in zip(grid.dims, spacing)
    )
    scale = target / spacing
    affine = np.array(grid.affine)
    affine[:3, :3] = affine[:3, :3] * scale

    if np.allclose(scale, 1.0, rtol=0, atol=1e-12) and out_dims == grid.dims:
        return VoxelGrid(grid.samples, (target,) * 3, affine, grid.unit)

    order = 1 if mode == "trilinear" else 0
    out = ndimage.affine_transform(
        grid.samples,
        np.diag(scale),
        output_shape=out_dims,
        output=np.float32 if order == 1 else grid.samples.dtype,
        order=order,
        mode="nearest",
        prefilter=False,
    )
    return VoxelGrid(out, (target,) * 3, affine, grid.unit)


def clip_normalize(grid: VoxelGrid, params: PreprocessParams = PreprocessParams()) -> VoxelGrid:
    """Clamp HU values to ``[clip_low, clip_high]`` and map linearly onto [0, 1]."""
    if grid.unit != "HU":
        raise ParameterError(f"clip_normalize expects an HU grid, got {grid.unit!r}")
    lo, hi = float(params.clip_low), float(params.clip_high)
    v = np.clip(grid.samples.astype(np.float64), lo, hi)
    out = (v - lo) / (hi - lo)
    return grid.with_samples(out.astype(np.float32), unit="probability")


def lung_bbox(lung_mask: VoxelGrid, margin: int = 0) -> BoundingBox:
    """Tightest box around the nonzero voxels, grown by `margin` and clamped."""
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    fg = lung_mask.samples != 0
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(fg.any(axis=other))
        if hits.size == 0:
            raise EmptyMaskError("lung mask has no foreground voxels")
        lo.append(max(0, int(hits[0]) - margin))
        hi.append(min(lung_mask.dims[axis] - 1, int(hits[-1]) + margin))
    return BoundingBox(tuple(lo), tuple(hi))


def crop(grid: VoxelGrid, box: BoundingBox) -> VoxelGrid:
    """Extract `box` from `grid`, translating the affine to keep world positions."""
    if not box.inside(grid.dims):
        raise BoundsError(f"box {box} outside grid dims {grid.dims}")
    affine = np.array(grid.affine)
    affine[:3, 3] = (grid.affine @ np.array([*box.min, 1.0]))[:3]
    return VoxelGrid(grid.samples[box.slices].copy(order="F"), grid.spacing, affine, grid.unit)


def clip_trachea_at_lung_top(airway_mask: VoxelGrid, lung_mask: VoxelGrid) -> VoxelGrid:
    """Zero every airway voxel lying above the highest lung voxel.

    "Above" is measured along the voxel axis whose affine column has the
    largest world-z component, in the direction of increasing z.
    """
    if not (airway_mask.is_binary and lung_mask.is_binary):
        raise ParameterError("clip_trachea_at_lung_top expects two binary masks")
    if not airway_mask.same_geometry(lung_mask):
        raise ShapeError(
            f"airway {airway_mask.dims} and lung {lung_mask.dims} masks differ in geometry"
        )
    axis, sign = lung_mask.superior_axis()
    other = tuple(a for a in range(3) if a != axis)
    slices_with_lung = np.flatnonzero(lung_mask.samples.any(axis=other))
    if slices_with_lung.size == 0:
        raise EmptyMaskError("lung mask has no foreground voxels")

    out = np.array(airway_mask.samples, order="F")
    index = [slice(None)] * 3
    if sign > 0:
        index[axis] = slice(int(slices_with_lung[-1]) + 1, None)
    else:
        index[axis] = slice(0, int(slices_with_lung[0]))
    out[tuple(index)] = 0
    return airway_mask.with_samples(out)
