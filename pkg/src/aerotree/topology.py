"""Skeletons, centerline graphs and radius estimates of binary masks.

Thinning is directional border-point deletion with 26/6 topology
preservation and endpoint protection (see :mod:`aerotree._thinning`).
Branch decomposition and the radius field work on voxel coordinates and
do not depend on how the skeleton was produced.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ._kernels import first_voxel_order, point_edt, relabel_into
from ._thinning import thin
from .errors import ConsistencyError, ParameterError
from .volume import VoxelGrid

__all__ = [
    "Skeleton",
    "Node",
    "Branch",
    "CenterlineGraph",
    "RadiusField",
    "skeletonize",
    "build_graph",
    "radius_field",
    "connected_components",
    "foreground_bbox",
    "NEIGHBOR_OFFSETS",
]

NEIGHBOR_OFFSETS = np.array(
    [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)], dtype=np.int64
)
_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def foreground_bbox(fg: np.ndarray, pad: int = 0):
    """Slices of the tightest box around ``fg`` grown by `pad` (clamped), or None."""
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(fg.any(axis=other))
        if hits.size == 0:
            return None
        lo.append(max(0, int(hits[0]) - pad))
        hi.append(min(fg.shape[axis], int(hits[-1]) + 1 + pad))
    return tuple(slice(a, b) for a, b in zip(lo, hi))


def _scan_order(voxels: np.ndarray) -> np.ndarray:
    """Sort (N, 3) voxel indices in x-fastest scan order."""
    if len(voxels) == 0:
        return voxels.reshape(0, 3)
    order = np.lexsort((voxels[:, 0], voxels[:, 1], voxels[:, 2]))
    return voxels[order]


def _padded_local(fg: np.ndarray):
    """Crop ``fg`` to its bbox and surround it with one background layer."""
    box = foreground_bbox(fg)
    if box is None:
        return None, None
    local = np.zeros(tuple(s.stop - s.start + 2 for s in box), dtype=bool)
    local[1:-1, 1:-1, 1:-1] = fg[box]
    origin = np.array([s.start - 1 for s in box], dtype=np.int64)
    return local, origin


@dataclass(frozen=True, eq=False)
class Skeleton:
    """One-voxel-thick centerline voxels of a mask, in x-fastest scan order."""

    voxels: np.ndarray
    source_dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "voxels", _scan_order(vox))

    def __len__(self):
        return len(self.voxels)

    def as_set(self) -> set:
        return {tuple(v) for v in self.voxels.tolist()}

    def to_array(self) -> np.ndarray:
        arr = np.zeros(self.source_dims, dtype=bool, order="F")
        if len(self.voxels):
            arr[tuple(self.voxels.T)] = True
        return arr


def skeletonize(mask: VoxelGrid, prune_spurs: bool = True) -> Skeleton:
    """Topology-preserving thinning of a binary mask to a curve skeleton.

    Surface bumps on oblique tubes leave short terminal spurs. With
    `prune_spurs`, a terminal branch is dropped when its length does not
    exceed the sum of the inscribed radii at its tip and at its junction,
    i.e. it never leaves the union of those two balls. The remainder is
    re-thinned and the test repeated until nothing changes.
    """
    if not mask.is_binary:
        raise ParameterError(f"skeletonize expects a binary mask, got {mask.unit!r}")
    local, origin = _padded_local(mask.samples != 0)
    if local is None:
        return Skeleton(np.empty((0, 3), np.int64), mask.dims, mask.spacing)
    skel = thin(local)
    if prune_spurs:
        spacing = np.asarray(mask.spacing, dtype=float)
        while True:
            drop = _spur_voxels(np.argwhere(skel), local.view(np.uint8), spacing)
            if not len(drop):
                break
            skel[tuple(drop.T)] = False
            skel = thin(skel)
    return Skeleton(np.argwhere(skel) + origin, mask.dims, mask.spacing)


def _spur_voxels(voxels: np.ndarray, fg: np.ndarray, spacing) -> np.ndarray:
    nodes, branches = _decompose(voxels, spacing, None)
    pairs = []
    for b in branches:
        a, c = b.nodes
        if a < 0 or c < 0 or a == c:
            continue
        if {nodes[a].kind, nodes[c].kind} != {"endpoint", "junction"}:
            continue
        tip, hub = (nodes[a], nodes[c]) if nodes[a].kind == "endpoint" else (nodes[c], nodes[a])
        pairs.append((b, tip, hub))
    if not pairs:
        return np.empty((0, 3), np.int64)
    where = np.array([[t.position, h.position] for _, t, h in pairs], dtype=np.int64)
    r = point_edt(fg, where.reshape(-1, 3), spacing).reshape(-1, 2)
    drop = []
    for (b, tip, _), (rt, rh) in zip(pairs, r):
        if b.length_mm <= rt + rh + 1e-9:
            drop.append(b.interior)
            drop.append(np.array(tip.voxels))
    if not drop:
        return np.empty((0, 3), np.int64)
    return np.concatenate(drop).astype(np.int64)


@dataclass
class Node:
    position: Tuple[int, int, int]
    kind: str  # "endpoint" | "junction"
    voxels: List[Tuple[int, int, int]]
    branches: List[int] = field(default_factory=list)


@dataclass
class Branch:
    """Centerline path between two nodes.

    ``voxel_path`` starts and ends on the attaching node voxels; ``interior``
    holds only the voxels owned by the branch itself. Closed loops have no
    nodes and repeat no voxel; their length includes the closing step.
    """

    voxel_path: np.ndarray
    length_mm: float
    nodes: Tuple[int, int]
    component: int
    mean_radius_mm: float = float("nan")
    loop: bool = False
    closed: bool = False

    @property
    def interior(self) -> np.ndarray:
        return self.voxel_path if self.closed else self.voxel_path[1:-1]

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_path)


@dataclass
class CenterlineGraph:
    nodes: List[Node]
    branches: List[Branch]
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]

    @property
    def endpoints(self) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "endpoint"]

    @property
    def junctions(self) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "junction"]

    @property
    def total_length_mm(self) -> float:
        return float(sum(b.length_mm for b in self.branches))

    def voxels(self) -> np.ndarray:
        parts = [np.asarray(n.voxels, dtype=np.int64).reshape(-1, 3) for n in self.nodes]
        parts += [b.interior for b in self.branches]
        if not parts:
            return np.empty((0, 3), np.int64)
        return np.unique(np.concatenate(parts), axis=0)

    def to_dict(self) -> dict:
        """JSON-ready description (nodes, branch paths, lengths, radii)."""
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "nodes": [
                {"position": list(n.position), "kind": n.kind, "size": len(n.voxels),
                 "branches": list(n.branches)}
                for n in self.nodes
            ],
            "branches": [
                {
                    "nodes": list(b.nodes),
                    "component": b.component,
                    "length_mm": b.length_mm,
                    "mean_radius_mm": None if np.isnan(b.mean_radius_mm) else b.mean_radius_mm,
                    "loop": b.loop,
                    "path": b.voxel_path.tolist(),
                }
                for b in self.branches
            ],
        }


def path_length_mm(path: np.ndarray, spacing: Sequence[float], closed: bool = False) -> float:
    """Physical length of a voxel polyline (steps weighted by spacing)."""
    pts = np.asarray(path, dtype=float) * np.asarray(spacing, dtype=float)
    if closed and len(pts) > 1:
        pts = np.vstack([pts, pts[:1]])
    if len(pts) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def _neighbor_table(voxels: np.ndarray) -> np.ndarray:
    """(N, 26) indices of 26-neighbours within `voxels`, -1 where absent."""
    origin = voxels.min(axis=0) - 1
    local = voxels - origin
    shape = tuple(local.max(axis=0) + 2)
    ids = np.full(shape, -1, dtype=np.int64)
    ids[tuple(local.T)] = np.arange(len(voxels))
    table = np.empty((len(voxels), 26), dtype=np.int64)
    for n, off in enumerate(NEIGHBOR_OFFSETS):
        table[:, n] = ids[tuple((local + off).T)]
    return table


def _components_of(table: np.ndarray) -> np.ndarray:
    """Component id per voxel, numbered by first appearance in scan order."""
    comp = np.full(len(table), -1, dtype=np.int64)
    count = 0
    for seed in range(len(table)):
        if comp[seed] >= 0:
            continue
        comp[seed] = count
        stack = [seed]
        while stack:
            v = stack.pop()
            for u in table[v]:
                if u >= 0 and comp[u] < 0:
                    comp[u] = count
                    stack.append(u)
        count += 1
    return comp


def _decompose(voxels: np.ndarray, spacing, radius_lookup) -> Tuple[List[Node], List[Branch]]:
    table = _neighbor_table(voxels)
    nbrs = [row[row >= 0].tolist() for row in table]
    degree = np.array([len(n) for n in nbrs])
    comp = _components_of(table)

    node_of = np.full(len(voxels), -1, dtype=np.int64)
    nodes: List[Node] = []
    node_members: List[List[int]] = []
    for v in range(len(voxels)):
        if node_of[v] >= 0 or degree[v] == 2:
            continue
        if degree[v] <= 1:
            members = [v]
            kind = "endpoint"
        else:
            # junction cluster: 26-connected voxels of degree >= 3
            members, stack = [v], [v]
            node_of[v] = len(nodes)
            while stack:
                w = stack.pop()
                for u in nbrs[w]:
                    if degree[u] >= 3 and node_of[u] < 0:
                        node_of[u] = len(nodes)
                        members.append(u)
                        stack.append(u)
            members.sort()
            kind = "junction"
        for m in members:
            node_of[m] = len(nodes)
        pts = voxels[members]
        centre = pts.mean(axis=0)
        pos = pts[int(np.argmin(((pts - centre) ** 2).sum(axis=1)))]
        nodes.append(Node(tuple(int(c) for c in pos), kind, [tuple(p) for p in pts.tolist()]))
        node_members.append(members)

    visited = np.zeros(len(voxels), dtype=bool)
    paths: List[Tuple[List[int], int, int, bool]] = []
    direct_seen = set()
    for n, members in enumerate(node_members):
        for v in members:
            for u in nbrs[v]:
                m = node_of[u]
                if m == n:
                    continue
                if m >= 0:
                    key = (min(u, v), max(u, v))
                    if key not in direct_seen:
                        direct_seen.add(key)
                        paths.append(([v, u], n, int(m), False))
                    continue
                if visited[u]:
                    continue
                path, prev, cur = [v, u], v, u
                while True:
                    visited[cur] = True
                    nxt = [w for w in nbrs[cur] if w != prev]
                    if not nxt:
                        end = -1
                        break
                    w = nxt[0]
                    path.append(w)
                    if node_of[w] >= 0:
                        end = int(node_of[w])
                        break
                    if visited[w]:
                        end = -1
                        break
                    prev, cur = cur, w
                paths.append((path, n, end, False))

    # cycles made only of degree-2 voxels
    for s in np.flatnonzero(~visited & (node_of < 0)):
        if visited[s]:
            continue
        path, prev, cur = [int(s)], -1, int(s)
        visited[cur] = True
        while True:
            nxt = [w for w in nbrs[cur] if w != prev and not visited[w]]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            visited[cur] = True
            path.append(cur)
        paths.append((path, -1, -1, True))

    branches: List[Branch] = []
    for path, a, b, closed in paths:
        pts = voxels[path]
        length = path_length_mm(pts, spacing, closed=closed)
        if radius_lookup is not None:
            mean_r = float(np.mean([radius_lookup[tuple(p)] for p in pts.tolist()]))
        else:
            mean_r = float("nan")
        bid = len(branches)
        branches.append(
            Branch(
                voxel_path=pts,
                length_mm=length,
                nodes=(a, b),
                component=int(comp[path[0]]),
                mean_radius_mm=mean_r,
                loop=closed or a == b or b < 0,
                closed=closed,
            )
        )
        if a >= 0:
            nodes[a].branches.append(bid)
        if b >= 0 and b != a:
            nodes[b].branches.append(bid)
    return nodes, branches


def build_graph(
    skel: Skeleton,
    radius: Optional["RadiusField"] = None,
    min_branch_length_mm: float = 0.0,
) -> CenterlineGraph:
    """Split a skeleton into nodes (endpoints, junction clusters) and branches.

    Endpoints have exactly one skeleton neighbour; junction voxels have three
    or more and 26-adjacent ones are merged into a single node. Branches are
    the maximal chains of degree-2 voxels between nodes.

    With ``min_branch_length_mm > 0``, terminal branches shorter than the
    limit are pruned from the skeleton (and the rest re-thinned) repeatedly
    until none remain.
    """
    if min_branch_length_mm < 0:
        raise ParameterError("min_branch_length_mm must be >= 0")
    voxels = skel.voxels
    lookup = radius.as_dict() if radius is not None else None
    if len(voxels) == 0:
        return CenterlineGraph([], [], skel.source_dims, skel.spacing)

    while True:
        nodes, branches = _decompose(voxels, skel.spacing, lookup)
        if min_branch_length_mm <= 0:
            break
        drop = set()
        for b in branches:
            a, c = b.nodes
            if a < 0 or c < 0 or a == c:
                continue
            kinds = {nodes[a].kind, nodes[c].kind}
            if kinds == {"endpoint", "junction"} and b.length_mm < min_branch_length_mm:
                tip = a if nodes[a].kind == "endpoint" else c
                drop.update(map(tuple, b.interior.tolist()))
                drop.update(nodes[tip].voxels)
        if not drop:
            break
        keep = np.array([tuple(v) not in drop for v in voxels.tolist()])
        voxels = _rethin(voxels[keep])
    return CenterlineGraph(nodes, branches, skel.source_dims, skel.spacing)


def _rethin(voxels: np.ndarray) -> np.ndarray:
    """Thin a pruned voxel set again; junction bumps left by a removed branch go."""
    if len(voxels) == 0:
        return voxels
    origin = voxels.min(axis=0) - 1
    local = np.zeros(tuple(voxels.max(axis=0) - origin + 2), dtype=bool)
    local[tuple((voxels - origin).T)] = True
    return _scan_order(np.argwhere(thin(local)) + origin)


@dataclass(frozen=True, eq=False)
class RadiusField:
    """Distance (mm) from each skeleton voxel to the nearest background voxel."""

    voxels: np.ndarray
    radius_mm: np.ndarray

    def as_dict(self) -> Dict[Tuple[int, int, int], float]:
        return dict(zip(map(tuple, self.voxels.tolist()), self.radius_mm.tolist()))

    def at(self, voxel) -> float:
        hits = np.flatnonzero((self.voxels == np.asarray(voxel)).all(axis=1))
        if hits.size == 0:
            raise KeyError(tuple(voxel))
        return float(self.radius_mm[hits[0]])


def distance_map(fg: np.ndarray, spacing: Sequence[float]):
    """Euclidean distance (mm) to background over the bbox of ``fg``.

    Voxels outside the grid count as background. Returns the local map
    and the index origin of its corner.
    """
    local, origin = _padded_local(fg)
    if local is None:
        return None, None
    edt = ndimage.distance_transform_edt(local, sampling=tuple(float(s) for s in spacing))
    return edt, origin


def radius_field(mask: VoxelGrid, skel: Skeleton) -> RadiusField:
    """Exact anisotropic EDT of `mask` evaluated at the skeleton voxels.

    Voxels outside the grid count as background, as in `distance_map`.
    Only the skeleton voxels are evaluated, so no full-volume map is built.
    """
    fg = mask.samples != 0
    vox = skel.voxels
    if len(vox) == 0:
        return RadiusField(vox, np.empty(0))
    if np.any(vox < 0) or np.any(vox >= np.asarray(mask.dims)):
        raise ConsistencyError("skeleton voxel outside the mask grid")
    if not fg[tuple(vox.T)].all():
        raise ConsistencyError("skeleton voxel lies on mask background")
    spacing = np.asarray(mask.spacing, dtype=float)
    return RadiusField(vox, point_edt(fg.view(np.uint8), np.ascontiguousarray(vox), spacing))


def connected_components(mask: VoxelGrid, connectivity: int = 26):
    """Label foreground components.

    Returns ``(labels, sizes)``: an int32 array with labels ``1..C`` assigned
    in x-fastest scan order of each component's first voxel (0 = background),
    and ``sizes[c - 1]`` the voxel count of label ``c``.
    """
    if connectivity not in _STRUCTURES:
        raise ParameterError(f"connectivity must be 6 or 26, got {connectivity}")
    fg = mask.samples != 0 if isinstance(mask, VoxelGrid) else np.asarray(mask) != 0
    labels = np.zeros(fg.shape, dtype=np.int32, order="F")
    box = foreground_bbox(fg)
    if box is None:
        return labels, np.zeros(0, dtype=np.int64)
    local, count = ndimage.label(fg[box], structure=_STRUCTURES[connectivity])
    remap = first_voxel_order(local, count)
    sizes = np.zeros(count, dtype=np.int64)
    relabel_into(local, remap, labels, *(b.start for b in box), sizes)
    return labels, sizes
