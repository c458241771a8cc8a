"""Compiled helpers: point-wise exact EDT and scan-order relabelling."""
from __future__ import annotations

import numba as nb
import numpy as np


@nb.njit(cache=True)
def point_edt(fg, points, spacing):
    """Exact distance (mm) from each point to the nearest background voxel.

    Voxels outside ``fg`` count as background. Shells of growing Chebyshev
    radius ``k`` are scanned until no unvisited voxel can be closer than
    the best hit, i.e. until ``best <= (k + 1) * min(spacing)``.
    """
    nx, ny, nz = fg.shape
    sx, sy, sz = spacing[0], spacing[1], spacing[2]
    smin = min(sx, min(sy, sz))
    out = np.empty(len(points))
    for n in range(len(points)):
        px, py, pz = points[n, 0], points[n, 1], points[n, 2]
        if not (0 <= px < nx and 0 <= py < ny and 0 <= pz < nz) or fg[px, py, pz] == 0:
            out[n] = 0.0
            continue
        best = np.inf
        k = 1
        while True:
            for dx in range(-k, k + 1):
                x = px + dx
                for dy in range(-k, k + 1):
                    y = py + dy
                    ring = abs(dx) == k or abs(dy) == k
                    step = 1 if ring else 2 * k
                    dz = -k
                    while dz <= k:
                        z = pz + dz
                        bg = (x < 0 or x >= nx or y < 0 or y >= ny or z < 0 or z >= nz
                              or fg[x, y, z] == 0)
                        if bg:
                            d2 = (dx * sx) ** 2 + (dy * sy) ** 2 + (dz * sz) ** 2
                            if d2 < best:
                                best = d2
                        dz += step
            reach = (k + 1) * smin
            if best <= reach * reach:
                break
            k += 1
        out[n] = np.sqrt(best)
    return out


@nb.njit(cache=True)
def first_voxel_order(labels, count):
    """Rank of each label by the x-fastest scan position of its first voxel."""
    seen = np.zeros(count + 1, dtype=np.bool_)
    rank = np.zeros(count + 1, dtype=np.int32)
    nx, ny, nz = labels.shape
    r = 0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                v = labels[i, j, k]
                if v != 0 and not seen[v]:
                    seen[v] = True
                    r += 1
                    rank[v] = r
    return rank


@nb.njit(cache=True)
def relabel_into(local, remap, out, ox, oy, oz, sizes):
    nx, ny, nz = local.shape
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                v = local[i, j, k]
                if v != 0:
                    w = remap[v]
                    out[ox + i, oy + j, oz + k] = w
                    sizes[w - 1] += 1
