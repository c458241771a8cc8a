"""Ensembling of model probability maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError
from .volume import VoxelGrid

__all__ = ["FusionParams", "ensemble_max", "threshold"]


@dataclass(frozen=True)
class FusionParams:
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"threshold must lie in (0, 1), got {self.threshold}")


def ensemble_max(maps: Sequence[VoxelGrid]) -> VoxelGrid:
    """Voxel-wise maximum over probability maps sharing one geometry."""
    maps = list(maps)
    if not maps:
        raise ParameterError("ensemble_max needs at least one probability map")
    first = maps[0]
    for m in maps:
        if m.unit != "probability":
            raise ParameterError(f"expected probability maps, got unit {m.unit!r}")
        if not first.same_geometry(m):
            raise ShapeError(
                f"map geometry {m.dims}/{m.spacing} differs from {first.dims}/{first.spacing}"
            )
    if len(maps) == 1:
        return first
    out = np.array(first.samples, order="F")
    for m in maps[1:]:
        np.maximum(out, m.samples, out=out)
    return first.with_samples(out)


def threshold(prob: VoxelGrid, params: FusionParams = FusionParams()) -> VoxelGrid:
    """Binary mask of voxels with probability ``>= params.threshold``."""
    if prob.unit != "probability":
        raise ParameterError(f"threshold expects a probability map, got {prob.unit!r}")
    mask = prob.samples >= np.float32(params.threshold)
    return prob.with_samples(mask.view(np.uint8), unit="binary")
