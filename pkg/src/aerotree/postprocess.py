"""Refinement of a thresholded airway mask.

The largest 26-connected component is taken as the airway tree. Free
fragments whose end is aligned with an end of the tree and close to it
are bridged with a tube of matching radius. Whatever is still detached
afterwards is discarded.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, ParameterError
from .topology import (
    CenterlineGraph,
    RadiusField,
    Skeleton,
    build_graph,
    connected_components,
    radius_field,
    skeletonize,
)
from .volume import VoxelGrid

__all__ = [
    "ReconnectParams",
    "FreeSegment",
    "AirwayTreeDecomposition",
    "EndpointDirection",
    "Match",
    "RefineResult",
    "digital_line",
    "tube_region",
    "rasterize_tube",
    "identify_main_tree",
    "endpoint_directions",
    "match_segments",
    "refine",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconnectParams:
    search_radius_mm: float = 10.0
    max_angle_deg: float = 30.0
    orientation_window: int = 8
    max_orientation_variance: float = 400.0
    min_island_voxels: int = 0
    max_passes: int = 1

    def __post_init__(self):
        if not self.search_radius_mm > 0:
            raise ParameterError("search_radius_mm must be > 0")
        if not 0 < self.max_angle_deg <= 90:
            raise ParameterError("max_angle_deg must lie in (0, 90]")
        if self.orientation_window < 2:
            raise ParameterError("orientation_window must be >= 2")
        if not self.max_orientation_variance > 0:
            raise ParameterError("max_orientation_variance must be > 0")
        if self.min_island_voxels < 0 or self.max_passes < 1:
            raise ParameterError("min_island_voxels must be >= 0 and max_passes >= 1")


# ---------------------------------------------------------------------------
# geometry helpers


def digital_line(a: Sequence[int], b: Sequence[int]) -> np.ndarray:
    """26-connected voxel line from `a` to `b`, both ends included."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = int(np.max(np.abs(b - a)))
    if n == 0:
        return a.astype(np.int64).reshape(1, 3)
    t = np.arange(n + 1)[:, None] / n
    return np.floor(a + t * (b - a) + 0.5).astype(np.int64)


def tube_region(points, radius_mm: float, shape, spacing):
    """Voxels within `radius_mm` of a polyline, restricted to its bounding box.

    `points` are continuous voxel coordinates. Returns ``(slices, local)``
    with ``local`` a boolean array over ``slices``, or ``None`` when the
    tube misses the grid entirely.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    spacing = np.asarray(spacing, dtype=float)
    reach = radius_mm / spacing
    lo = np.maximum(np.floor(pts.min(axis=0) - reach).astype(int), 0)
    hi = np.minimum(np.ceil(pts.max(axis=0) + reach).astype(int), np.asarray(shape) - 1)
    if np.any(lo > hi):
        return None
    axes = [np.arange(l, h + 1) * s for l, h, s in zip(lo, hi, spacing)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    mm = pts * spacing
    best = np.full(grid.shape[:3], np.inf)
    if len(mm) == 1:
        best = ((grid - mm[0]) ** 2).sum(axis=-1)
    for p, q in zip(mm[:-1], mm[1:]):
        d = q - p
        dd = float(d @ d)
        rel = grid - p
        if dd == 0:
            dist2 = (rel**2).sum(axis=-1)
        else:
            t = np.clip(rel @ d / dd, 0.0, 1.0)
            dist2 = ((rel - t[..., None] * d) ** 2).sum(axis=-1)
        np.minimum(best, dist2, out=best)
    local = best <= radius_mm**2 * (1 + 1e-9)
    slices = tuple(slice(l, h + 1) for l, h in zip(lo, hi))
    return slices, local


def rasterize_tube(path, radius_mm: float, shape, spacing) -> np.ndarray:
    """Binary capsule of `radius_mm` around a voxel polyline, clipped to the grid.

    Every in-grid voxel of the (rounded) path is foreground.
    """
    if not radius_mm > 0:
        raise ParameterError(f"tube radius must be > 0, got {radius_mm}")
    out = np.zeros(tuple(shape), dtype=bool, order="F")
    region = tube_region(path, radius_mm, shape, spacing)
    if region is not None:
        slices, local = region
        out[slices] |= local
    vox = np.floor(np.atleast_2d(np.asarray(path, dtype=float)) + 0.5).astype(np.int64)
    inside = np.all((vox >= 0) & (vox < np.asarray(shape)), axis=1)
    if inside.any():
        out[tuple(vox[inside].T)] = True
    return out


# ---------------------------------------------------------------------------
# decomposition


@dataclass
class FreeSegment:
    label: int
    voxel_count: int
    graph: CenterlineGraph

    @property
    def endpoints(self) -> List[int]:
        return self.graph.endpoints


@dataclass
class AirwayTreeDecomposition:
    """Main airway component plus the detached fragments of a mask."""

    mask: VoxelGrid
    labels: np.ndarray
    sizes: np.ndarray
    main_label: int
    main_graph: CenterlineGraph
    free_segments: List[FreeSegment]
    radius: RadiusField

    @property
    def main_mask(self) -> VoxelGrid:
        return self.mask.with_samples(self.labels == self.main_label)

    def segment_mask(self, label: int) -> VoxelGrid:
        return self.mask.with_samples(self.labels == label)


def identify_main_tree(mask: VoxelGrid) -> AirwayTreeDecomposition:
    """Split `mask` into its largest 26-connected component and free segments.

    Ties on size go to the component reaching furthest superiorly.
    """
    if not mask.is_binary:
        raise ParameterError("identify_main_tree expects a binary mask")
    labels, sizes = connected_components(mask, 26)
    if sizes.size == 0:
        raise EmptyMaskError("mask has no foreground voxels")

    biggest = np.flatnonzero(sizes == sizes.max()) + 1
    if len(biggest) == 1:
        main = int(biggest[0])
    else:
        axis, sign = mask.superior_axis()
        coords = np.argwhere(np.isin(labels, biggest))
        labs = labels[tuple(coords.T)]
        height = coords[:, axis] * sign
        tops = {int(l): int(height[labs == l].max()) for l in biggest}
        main = max(biggest, key=lambda l: (tops[int(l)], -int(l)))
        main = int(main)

    skel = skeletonize(mask)
    radius = radius_field(mask, skel)
    skel_labels = labels[tuple(skel.voxels.T)] if len(skel) else np.empty(0, int)

    def graph_for(label):
        sub = Skeleton(skel.voxels[skel_labels == label], skel.source_dims, skel.spacing)
        return build_graph(sub, radius)

    free = [
        FreeSegment(label, int(sizes[label - 1]), graph_for(label))
        for label in range(1, len(sizes) + 1)
        if label != main
    ]
    return AirwayTreeDecomposition(mask, labels, sizes, main, graph_for(main), free, radius)


# ---------------------------------------------------------------------------
# matching


@dataclass
class EndpointDirection:
    node: int
    voxel: Tuple[int, int, int]
    direction: Optional[np.ndarray]
    variance_deg2: float
    fittable: bool
    radius_mm: float = 0.0
    airway_radius_mm: float = 0.0


def _angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 180.0
    return float(np.degrees(np.arccos(np.clip(u @ v / (nu * nv), -1.0, 1.0))))


def endpoint_directions(
    graph: CenterlineGraph,
    params: ReconnectParams = ReconnectParams(),
    radius: Optional[dict] = None,
) -> List[EndpointDirection]:
    """Outward direction and orientation variance at every graph endpoint.

    A line is fitted (least squares, via SVD) to the last
    ``orientation_window`` path voxels before each endpoint, in millimetres.
    Each window voxel deviates from that line by the angle its
    perpendicular offset subtends at half the window's extent along the
    line; the variance is the mean of these angles squared (deg^2). Single
    steps are not used because the staircase of an oblique digital line
    alone makes them swing by up to 35 degrees.

    `radius` maps voxels to inscribed radii. The endpoint's own value is
    kept for gap measurement; the median over the window stands for the
    airway radius, since the tip value shrinks toward a blunt end.
    """
    spacing = np.asarray(graph.spacing, dtype=float)
    out = []
    for idx in graph.endpoints:
        node = graph.nodes[idx]
        r = float(radius.get(node.position, 0.0)) if radius else 0.0
        if len(node.branches) != 1:
            out.append(EndpointDirection(idx, node.position, None, float("nan"), False, r))
            continue
        path = graph.branches[node.branches[0]].voxel_path
        if tuple(path[-1]) != node.position:
            path = path[::-1]
        window = path[-params.orientation_window:]
        if len(window) < 2:
            out.append(EndpointDirection(idx, node.position, None, float("nan"), False, r))
            continue
        pts = window * spacing
        centred = pts - pts.mean(axis=0)
        direction = np.linalg.svd(centred, full_matrices=False)[2][0]
        if direction @ (pts[-1] - pts[0]) < 0:
            direction = -direction
        along = centred @ direction
        perp = np.linalg.norm(centred - np.outer(along, direction), axis=1)
        half = max(0.5 * float(along.max() - along.min()), 1e-12)
        variance = float(np.mean(np.degrees(np.arctan2(perp, half)) ** 2))
        airway = r
        if radius:
            airway = float(np.median([radius.get(tuple(v), r) for v in window.tolist()]))
        out.append(EndpointDirection(idx, node.position, direction, variance, True, r, airway))
    return out


@dataclass
class Match:
    main_endpoint: Tuple[int, int, int]
    free_endpoint: Tuple[int, int, int]
    free_label: int
    gap_mm: float
    distance_mm: float
    tube_radius_mm: float
    angle_deg: float
    free_angle_deg: float
    path: np.ndarray = field(repr=False)


def match_segments(
    main_endpoints: Sequence[EndpointDirection],
    free_segments: Sequence[Tuple[int, Sequence[EndpointDirection]]],
    params: ReconnectParams,
    spacing: Sequence[float],
) -> List[Match]:
    """Pair tree endpoints with free-segment endpoints.

    `free_segments` holds ``(label, endpoint_directions)`` per fragment. The
    gap of a pair is the clearance between the inscribed balls at the two
    endpoints (centre distance minus both radii), which approximates the
    empty stretch between the two mask ends. A pair qualifies when the gap
    is within the search radius, the centre distance within twice of it,
    both endpoint directions point at each other within ``max_angle_deg``,
    and both orientation variances are within bounds. Pairs are then
    accepted greedily by (gap, angle, endpoint order); every fragment and
    every tree endpoint is used at most once.
    """
    spacing = np.asarray(spacing, dtype=float)
    candidates = []
    mains = [m for m in main_endpoints if m.fittable
             and m.variance_deg2 <= params.max_orientation_variance]
    for mi, m in enumerate(mains):
        pm = np.asarray(m.voxel, dtype=float) * spacing
        for label, ends in free_segments:
            for fi, f in enumerate(ends):
                if not f.fittable or f.variance_deg2 > params.max_orientation_variance:
                    continue
                vec = np.asarray(f.voxel, dtype=float) * spacing - pm
                dist = float(np.linalg.norm(vec))
                gap = max(0.0, dist - m.radius_mm - f.radius_mm)
                if dist == 0 or gap > params.search_radius_mm:
                    continue
                if dist > 2 * params.search_radius_mm:
                    continue
                a_main = _angle_deg(m.direction, vec)
                a_free = _angle_deg(f.direction, -vec)
                if a_main > params.max_angle_deg or a_free > params.max_angle_deg:
                    continue
                candidates.append((gap, a_main, mi, label, fi, m, f, a_free, dist))

    candidates.sort(key=lambda c: c[:5])
    used_main, used_free, matches = set(), set(), []
    for gap, a_main, mi, label, fi, m, f, a_free, dist in candidates:
        if mi in used_main or label in used_free:
            continue
        used_main.add(mi)
        used_free.add(label)
        matches.append(
            Match(m.voxel, f.voxel, label, gap, dist,
                  0.5 * (m.airway_radius_mm + f.airway_radius_mm), a_main, a_free,
                  digital_line(m.voxel, f.voxel))
        )
    return matches


# ---------------------------------------------------------------------------
# refinement


@dataclass
class RefineResult:
    mask: VoxelGrid
    reconnected: List[dict]
    discarded: List[dict]

    @property
    def report(self) -> dict:
        return {"reconnected": self.reconnected, "discarded": self.discarded}


def refine(
    mask: VoxelGrid,
    radius: Optional[RadiusField] = None,
    params: ReconnectParams = ReconnectParams(),
) -> RefineResult:
    """Reconnect aligned free segments to the main tree and drop the rest.

    The result is a single 26-connected component that contains every voxel
    of the original main component. `radius` supplies tube radii at the
    endpoints; it defaults to the EDT sampled on the mask skeleton.
    """
    if not mask.is_binary:
        raise ParameterError("refine expects a binary mask")
    spacing = mask.spacing
    min_radius = float(min(spacing))
    current = mask
    reconnected: List[dict] = []
    main_seed = None

    for _ in range(params.max_passes):
        deco = identify_main_tree(current)
        if main_seed is None:
            main_seed = tuple(np.argwhere(deco.labels == deco.main_label)[0])
        if not deco.free_segments:
            break
        lookup = deco.radius.as_dict()
        if radius is not None:
            lookup.update(radius.as_dict())
        main_dirs = endpoint_directions(deco.main_graph, params, lookup)
        free_dirs = [(s.label, endpoint_directions(s.graph, params, lookup))
                     for s in deco.free_segments]
        matches = match_segments(main_dirs, free_dirs, params, spacing)
        if not matches:
            break
        out = np.array(current.samples, dtype=bool, order="F")
        for m in matches:
            tube_r = max(m.tube_radius_mm, min_radius)
            added = int(np.count_nonzero(~out[tuple(m.path.T)]))
            out[tuple(m.path.T)] = True
            region = tube_region(m.path, tube_r, current.dims, spacing)
            if region is not None:
                slices, local = region
                added += int(np.count_nonzero(local & ~out[slices]))
                out[slices] |= local
            reconnected.append(
                {
                    "main_endpoint": list(map(int, m.main_endpoint)),
                    "free_endpoint": list(map(int, m.free_endpoint)),
                    "gap_mm": m.gap_mm,
                    "distance_mm": m.distance_mm,
                    "angle_deg": m.angle_deg,
                    "tube_radius_mm": tube_r,
                    "added_voxels": added,
                }
            )
            log.debug("bridged segment %d: gap %.2f mm, radius %.2f mm",
                      m.free_label, m.gap_mm, tube_r)
        current = current.with_samples(out)

    labels, sizes = connected_components(current, 26)
    keep = int(labels[main_seed])
    out = labels == keep
    others = [l for l in range(1, len(sizes) + 1)
              if l != keep and sizes[l - 1] >= params.min_island_voxels]
    # per-island bounding boxes keep this cheap on large grids
    boxes = ndimage.find_objects(labels) if others else []
    discarded = []
    for label in others:
        box = boxes[label - 1]
        local = np.argwhere(labels[box] == label).mean(axis=0)
        c = local + [sl.start for sl in box]
        world = (current.affine @ np.array([*c, 1.0]))[:3]
        discarded.append({"voxels": int(sizes[label - 1]), "centroid": [float(v) for v in world]})
    return RefineResult(current.with_samples(out), reconnected, discarded)
