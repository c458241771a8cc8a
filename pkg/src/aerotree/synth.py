"""Synthetic bifurcating airway trees with exact ground truth.

Each generation splits every branch in two. Branch ``i`` has children
``2i + 1`` and ``2i + 2``, so ids follow breadth-first order. Branches are
rasterised as capsules (swept spheres) with :func:`postprocess.tube_region`,
so the generator and the refinement step share one tube rasteriser.

The root starts at the top of the tree and runs towards decreasing world
z (inferior), like a trachea.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConsistencyError, ParameterError, SpecError
from .postprocess import digital_line, tube_region
from .topology import connected_components
from .volume import VoxelGrid

__all__ = [
    "SynthTreeSpec",
    "SynthBranch",
    "SynthTreeTruth",
    "CutResult",
    "generate",
    "cut_branch",
    "add_noise_blob",
    "displace_fragment",
    "lung_surrogate",
]

_JITTER = 0.2


@dataclass(frozen=True)
class SynthTreeSpec:
    seed: int = 0
    depth: int = 2
    root_length_mm: float = 22.0
    root_radius_mm: float = 3.0
    length_decay: float = 0.75
    radius_decay: float = 0.75
    branch_angle_deg: float = 35.0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    dims: Tuple[int, int, int] = (64, 64, 64)
    jitter: bool = True
    margin_voxels: int = 2

    def validate(self):
        if self.depth < 0:
            raise SpecError(f"depth must be >= 0, got {self.depth}")
        if self.root_length_mm <= 0 or self.root_radius_mm <= 0:
            raise SpecError("root length and radius must be positive")
        for name in ("length_decay", "radius_decay"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise SpecError(f"{name} must lie in (0, 1], got {v}")
        if not 0 < self.branch_angle_deg < 90:
            raise SpecError("branch_angle_deg must lie in (0, 90)")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise SpecError(f"invalid dims {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise SpecError(f"invalid spacing {self.spacing}")
        finest = self.root_radius_mm * self.radius_decay**self.depth
        if finest < max(self.spacing):
            raise SpecError(
                f"radius {finest:.3f} mm at depth {self.depth} is below one voxel "
                f"({max(self.spacing)} mm)"
            )

    @property
    def branch_count(self) -> int:
        return 2 ** (self.depth + 1) - 1


@dataclass
class SynthBranch:
    id: int
    parent: int
    generation: int
    start_mm: Tuple[float, float, float]
    end_mm: Tuple[float, float, float]
    radius_mm: float
    length_mm: float

    @property
    def children(self) -> Tuple[int, int]:
        return 2 * self.id + 1, 2 * self.id + 2

    @property
    def direction(self) -> np.ndarray:
        d = np.subtract(self.end_mm, self.start_mm)
        return d / np.linalg.norm(d)


@dataclass
class SynthTreeTruth:
    spec: SynthTreeSpec
    mask: VoxelGrid
    branches: List[SynthBranch]
    centerlines: List[np.ndarray] = field(repr=False)

    @property
    def branch_count(self) -> int:
        return len(self.branches)

    @property
    def total_length_mm(self) -> float:
        return float(sum(b.length_mm for b in self.branches))

    def is_terminal(self, branch_id: int) -> bool:
        return self.branches[branch_id].generation == self.spec.depth

    def to_dict(self) -> dict:
        spec = asdict(self.spec)
        return {
            "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in spec.items()},
            "branch_count": self.branch_count,
            "total_length_mm": self.total_length_mm,
            "foreground_voxels": int(np.count_nonzero(self.mask.samples)),
            "branches": [
                {**asdict(b), "centerline": c.tolist()}
                for b, c in zip(self.branches, self.centerlines)
            ],
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _perpendicular_basis(d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = np.cross(d, ref)
    a /= np.linalg.norm(a)
    return a, np.cross(d, a)


def _layout(spec: SynthTreeSpec) -> List[SynthBranch]:
    rng = np.random.default_rng(spec.seed)

    def wiggle():
        return 1.0 + (_JITTER * rng.uniform(-1.0, 1.0) if spec.jitter else 0.0)

    theta0 = np.radians(spec.branch_angle_deg)
    root_dir = np.array([0.0, 0.0, -1.0])
    branches = [
        SynthBranch(0, -1, 0, (0.0, 0.0, 0.0), tuple(root_dir * spec.root_length_mm),
                    spec.root_radius_mm, spec.root_length_mm)
    ]
    for idx in range(2**spec.depth - 1):
        parent = branches[idx]
        g = parent.generation + 1
        d = parent.direction
        a, b = _perpendicular_basis(d)
        phi = (np.pi / 2) * (g - 1) + (np.pi / 2) * (wiggle() - 1.0)
        e = np.cos(phi) * a + np.sin(phi) * b
        length = spec.root_length_mm * spec.length_decay**g
        radius = spec.root_radius_mm * spec.radius_decay**g
        for side in (1.0, -1.0):
            theta = theta0 * wiggle()
            child_dir = np.cos(theta) * d + side * np.sin(theta) * e
            child_dir /= np.linalg.norm(child_dir)
            start = np.asarray(parent.end_mm)
            branches.append(
                SynthBranch(len(branches), idx, g, tuple(start),
                            tuple(start + child_dir * length), radius, length)
            )
    return branches


def generate(spec: SynthTreeSpec) -> SynthTreeTruth:
    """Lay out and rasterise a full binary tree of ``spec.depth`` generations.

    The tree's bounding box (radii included) is centred in the grid. Raises
    :class:`SpecError` if it does not fit with ``margin_voxels`` to spare.
    """
    spec.validate()
    branches = _layout(spec)
    spacing = np.asarray(spec.spacing, dtype=float)
    dims = np.asarray(spec.dims)

    ends = np.array([p for b in branches for p in (b.start_mm, b.end_mm)])
    radii = np.repeat([b.radius_mm for b in branches], 2)
    lo = (ends - radii[:, None]).min(axis=0)
    hi = (ends + radii[:, None]).max(axis=0)
    extent = (dims - 1) * spacing
    shift = (extent - (hi - lo)) / 2 - lo
    margin = spec.margin_voxels * spacing
    if np.any(lo + shift < margin) or np.any(hi + shift > extent - margin):
        raise SpecError(
            f"tree extent {np.round(hi - lo, 1).tolist()} mm does not fit grid "
            f"{dims.tolist()} at spacing {spacing.tolist()}"
        )
    for b in branches:
        b.start_mm = tuple(float(v) for v in np.asarray(b.start_mm) + shift)
        b.end_mm = tuple(float(v) for v in np.asarray(b.end_mm) + shift)

    fg = np.zeros(tuple(dims), dtype=bool, order="F")
    centerlines = []
    for b in branches:
        p, q = np.asarray(b.start_mm) / spacing, np.asarray(b.end_mm) / spacing
        region = tube_region([p, q], b.radius_mm, fg.shape, spacing)
        slices, local = region
        fg[slices] |= local
        centerlines.append(digital_line(np.floor(p + 0.5), np.floor(q + 0.5)))
    for line in centerlines:
        if not fg[tuple(line.T)].all():
            raise ConsistencyError("centerline voxel outside the rasterised tree")

    mask = VoxelGrid(fg, tuple(spacing), None, "binary")
    return SynthTreeTruth(spec, mask, branches, centerlines)


def lung_surrogate(truth: SynthTreeTruth, stub_mm: Optional[float] = None) -> VoxelGrid:
    """Box-shaped lung mask for clipping tests.

    With ``stub_mm=None`` the whole grid is lung. Otherwise the lung reaches
    up to ``stub_mm`` below the top of the root centerline, so that much of
    the trachea sticks out above it.
    """
    dims = truth.mask.dims
    lung = np.ones(dims, dtype=np.uint8, order="F")
    if stub_mm is not None:
        top_mm = truth.branches[0].start_mm[2] - stub_mm
        top_k = int(np.floor(top_mm / truth.mask.spacing[2]))
        if top_k < 0:
            raise ParameterError("stub longer than the tree extent")
        lung[:, :, top_k + 1:] = 0
    return truth.mask.with_samples(lung)


@dataclass
class CutResult:
    mask: VoxelGrid
    main_side: np.ndarray = field(repr=False)
    free_side: np.ndarray = field(repr=False)
    removed_voxels: int = 0

    @property
    def expected_free_voxels(self) -> int:
        return int(np.count_nonzero(self.free_side))


def _root_seed(truth: SynthTreeTruth) -> Tuple[int, int, int]:
    return tuple(int(v) for v in truth.centerlines[0][0])


def cut_branch(
    truth: SynthTreeTruth, branch_id: int, gap_mm: float, mask: Optional[VoxelGrid] = None
) -> CutResult:
    """Remove a slab `gap_mm` thick across the middle of one branch.

    Only voxels within one voxel of the branch's own tube are touched. The
    side still attached to the root is ``main_side``; everything severed
    from it is ``free_side``.
    """
    if not 0 <= branch_id < truth.branch_count:
        raise ParameterError(f"no branch {branch_id}")
    b = truth.branches[branch_id]
    if gap_mm < 0 or gap_mm >= b.length_mm:
        raise ParameterError(
            f"gap {gap_mm} mm must be in [0, branch length {b.length_mm:.2f} mm)"
        )
    base = truth.mask if mask is None else mask
    fg = np.array(base.samples, dtype=bool, order="F")
    removed = 0
    if gap_mm > 0:
        spacing = np.asarray(base.spacing)
        p, d = np.asarray(b.start_mm), b.direction
        t0 = 0.5 * (b.length_mm - gap_mm)
        reach = b.radius_mm + float(spacing.max())
        centre = p + d * (t0 + gap_mm / 2)
        region = tube_region([centre / spacing], reach + gap_mm, fg.shape, spacing)
        slices, _ = region
        axes = [np.arange(s.start, s.stop) * sp for s, sp in zip(slices, spacing)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1) - p
        t = pts @ d
        perp = np.linalg.norm(pts - t[..., None] * d, axis=-1)
        slab = (t >= t0) & (t <= t0 + gap_mm) & (perp <= reach)
        removed = int(np.count_nonzero(fg[slices] & slab))
        fg[slices] &= ~slab
    labels, _ = connected_components(fg, 26)
    root = labels[_root_seed(truth)]
    main_side = labels == root
    free_side = fg & ~main_side
    return CutResult(base.with_samples(fg), main_side, free_side, removed)


def _ball(center_mm, radius_mm, shape, spacing):
    region = tube_region([np.asarray(center_mm, float) / np.asarray(spacing)],
                         radius_mm, shape, spacing)
    if region is None:
        raise ParameterError("blob lies outside the grid")
    return region


def _check_clear(fg: np.ndarray, slices, local) -> None:
    """Reject an insert that would touch existing foreground (26-adjacency)."""
    grown = np.zeros(tuple(s.stop - s.start + 2 for s in slices), dtype=bool)
    grown[1:-1, 1:-1, 1:-1] = local
    grown = ndimage.binary_dilation(grown, ndimage.generate_binary_structure(3, 3))
    lo = [s.start - 1 for s in slices]
    src = tuple(slice(max(l, 0), min(l + n, dim)) for l, n, dim in zip(lo, grown.shape, fg.shape))
    sub = tuple(slice(s.start - l, s.stop - l) for s, l in zip(src, lo))
    if np.any(fg[src] & grown[sub]):
        raise ParameterError("inserted structure overlaps or touches the existing mask")


def add_noise_blob(mask, center_mm: Sequence[float], radius_mm: float):
    """Add a detached ball of `radius_mm`; returns ``(mask, island_voxels)``.

    `mask` may be a :class:`SynthTreeTruth` or a binary grid. Centres are
    in voxel-index millimetres (index times spacing).
    """
    grid = mask.mask if isinstance(mask, SynthTreeTruth) else mask
    if radius_mm <= 0:
        raise ParameterError("blob radius must be > 0")
    fg = np.array(grid.samples, dtype=bool, order="F")
    slices, local = _ball(center_mm, radius_mm, fg.shape, grid.spacing)
    _check_clear(fg, slices, local)
    fg[slices] |= local
    return grid.with_samples(fg), int(np.count_nonzero(local))


def displace_fragment(cut: CutResult, shift_vox: Sequence[int]) -> VoxelGrid:
    """Move the severed side of a cut by an integer voxel shift.

    Raises :class:`ParameterError` if the moved fragment leaves the grid or
    touches the remaining tree.
    """
    shift = np.asarray(shift_vox, dtype=np.int64)
    vox = np.argwhere(cut.free_side) + shift
    shape = np.asarray(cut.main_side.shape)
    if len(vox) == 0:
        raise ParameterError("cut has no free side to move")
    if np.any(vox < 0) or np.any(vox >= shape):
        raise ParameterError("displaced fragment leaves the grid")
    moved = np.zeros(cut.main_side.shape, dtype=bool, order="F")
    moved[tuple(vox.T)] = True
    grown = ndimage.binary_dilation(moved, ndimage.generate_binary_structure(3, 3))
    if np.any(grown & cut.main_side):
        raise ParameterError("displaced fragment touches the tree")
    return cut.mask.with_samples(cut.main_side | moved)
