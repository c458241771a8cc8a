"""Directional 3D curve thinning with sequential simple-point checks.

Six sub-iterations per pass (one per face direction ``d``). In each,
border points of that direction which are simple and not curve endpoints
are collected, then deleted one at a time in scan order after re-checking
on the current image. A candidate that is one voxel thin along ``d`` (its
``-d`` neighbour is background too) is skipped when a face neighbour was
deleted earlier in the same sub-iteration; without this guard the
sequential pass unzips two-voxel-wide ribbons from one end. Every deletion
removes a simple point, which preserves 26/6 topology, and a pass with no
deletion has no skips either, so at convergence no simple non-endpoint
voxel remains.

Simplicity follows the local characterisation of Bertrand and Malandain:
``p`` is simple iff the foreground of N26*(p) forms one 26-component and
the background of N18*(p) has exactly one 6-component 6-adjacent to ``p``.
"""
from __future__ import annotations

import itertools

import numba as nb
import numpy as np

_CUBE = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
_CENTER = 13


def _tables():
    n = len(_CUBE)
    adj26 = -np.ones((n, 26), dtype=np.int64)
    adj6 = -np.ones((n, 6), dtype=np.int64)
    for a in range(n):
        k26 = k6 = 0
        for b in range(n):
            if a == b:
                continue
            d = np.abs(_CUBE[a] - _CUBE[b])
            if d.max() == 1:
                adj26[a, k26] = b
                k26 += 1
                if d.sum() == 1:
                    adj6[a, k6] = b
                    k6 += 1
    l1 = np.abs(_CUBE).sum(axis=1)
    in18 = (l1 <= 2) & (l1 > 0)
    face = l1 == 1
    return adj26, adj6, in18, face


_ADJ26, _ADJ6, _IN18, _FACE = _tables()
# face directions for the six sub-iterations: +z, -z, +y, -y, +x, -x
_DIRECTIONS = np.array(
    [[0, 0, 1], [0, 0, -1], [0, 1, 0], [0, -1, 0], [1, 0, 0], [-1, 0, 0]], dtype=np.int64
)


@nb.njit(cache=True)
def _is_simple(nbh, adj26, adj6, in18, face):
    label = np.zeros(27, dtype=np.int64)
    stack = np.empty(27, dtype=np.int64)

    # foreground: exactly one 26-component in N26*
    comps = 0
    for s in range(27):
        if s == 13 or nbh[s] == 0 or label[s] != 0:
            continue
        comps += 1
        if comps > 1:
            return False
        label[s] = comps
        top = 0
        stack[top] = s
        top += 1
        while top > 0:
            top -= 1
            v = stack[top]
            for k in range(26):
                u = adj26[v, k]
                if u < 0:
                    break
                if u != 13 and nbh[u] != 0 and label[u] == 0:
                    label[u] = comps
                    stack[top] = u
                    top += 1
    if comps != 1:
        return False

    # background: exactly one 6-component of N18* that touches a face neighbour
    for s in range(27):
        label[s] = 0
    comps = 0
    for s in range(27):
        if not face[s] or nbh[s] != 0 or label[s] != 0:
            continue
        comps += 1
        if comps > 1:
            return False
        label[s] = comps
        top = 0
        stack[top] = s
        top += 1
        while top > 0:
            top -= 1
            v = stack[top]
            for k in range(6):
                u = adj6[v, k]
                if u < 0:
                    break
                if in18[u] and nbh[u] == 0 and label[u] == 0:
                    label[u] = comps
                    stack[top] = u
                    top += 1
    return comps == 1


@nb.njit(cache=True)
def _deletable(img, x, y, z, cube, nbh, adj26, adj6, in18, face):
    count = 0
    for n in range(27):
        v = img[x + cube[n, 0], y + cube[n, 1], z + cube[n, 2]]
        nbh[n] = v
        if n != 13 and v != 0:
            count += 1
    if count <= 1:
        return False  # isolated point or curve endpoint
    return _is_simple(nbh, adj26, adj6, in18, face)


@nb.njit(cache=True)
def _face_marked(mark, x, y, z):
    return (
        mark[x + 1, y, z] != 0 or mark[x - 1, y, z] != 0 or mark[x, y + 1, z] != 0
        or mark[x, y - 1, z] != 0 or mark[x, y, z + 1] != 0 or mark[x, y, z - 1] != 0
    )


@nb.njit(cache=True)
def _thin(img, pts, cube, adj26, adj6, in18, face, directions):
    nbh = np.zeros(27, dtype=np.uint8)
    mark = np.zeros(img.shape, dtype=np.uint8)
    alive = np.ones(len(pts), dtype=np.bool_)
    cand = np.empty(len(pts), dtype=np.int64)
    done = np.empty(len(pts), dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(6):
            dx, dy, dz = directions[d, 0], directions[d, 1], directions[d, 2]
            nc = 0
            for i in range(len(pts)):
                if not alive[i]:
                    continue
                x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
                if img[x + dx, y + dy, z + dz] != 0:
                    continue
                if _deletable(img, x, y, z, cube, nbh, adj26, adj6, in18, face):
                    cand[nc] = i
                    nc += 1
            nd = 0
            for c in range(nc):
                i = cand[c]
                x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
                if img[x - dx, y - dy, z - dz] == 0 and _face_marked(mark, x, y, z):
                    continue
                if _deletable(img, x, y, z, cube, nbh, adj26, adj6, in18, face):
                    img[x, y, z] = 0
                    mark[x, y, z] = 1
                    alive[i] = False
                    done[nd] = i
                    nd += 1
                    changed = True
            for c in range(nd):
                i = done[c]
                mark[pts[i, 0], pts[i, 1], pts[i, 2]] = 0
    return alive


def thin(fg: np.ndarray) -> np.ndarray:
    """Curve-thin a boolean volume; returns a boolean skeleton of equal shape.

    Voxels on the array border are treated as having background outside.
    """
    img = np.zeros(tuple(s + 2 for s in fg.shape), dtype=np.uint8)
    img[1:-1, 1:-1, 1:-1] = fg
    pts = np.argwhere(img).astype(np.int64)
    if len(pts) == 0:
        return np.zeros(fg.shape, dtype=bool)
    pts = pts[np.lexsort((pts[:, 0], pts[:, 1], pts[:, 2]))]
    _thin(img, pts, _CUBE, _ADJ26, _ADJ6, _IN18, _FACE, _DIRECTIONS)
    return img[1:-1, 1:-1, 1:-1].astype(bool)


def is_simple(nbh27) -> bool:
    """Simplicity of the centre of a 3x3x3 neighbourhood (index order i, j, k)."""
    flat = np.asarray(nbh27, dtype=np.uint8).reshape(27)
    return bool(_is_simple(flat, _ADJ26, _ADJ6, _IN18, _FACE))
