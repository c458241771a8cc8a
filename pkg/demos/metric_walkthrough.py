"""TD and BD by hand on a Y-shaped tube.

Three limbs of 30 voxels; the prediction misses one, so two thirds of the
centerline and two of the three branches are found.
"""
import numpy as np

from aerotree import (
    MetricParams,
    VoxelGrid,
    branch_detected,
    build_graph,
    rasterize_tube,
    skeletonize,
    tree_length_detected,
)

shape, sp = (80, 80, 80), (1.0, 1.0, 1.0)
hub = np.array([40, 40, 40])
tips = [hub + [0, 0, 30], hub + [21, 0, -21], hub + [-21, 0, -21]]


def limb(tip):
    return rasterize_tube([hub, tip], 2.0, shape, sp)


gt = limb(tips[0]) | limb(tips[1]) | limb(tips[2])
pred = limb(tips[0]) | limb(tips[1])
gt_grid = VoxelGrid(gt, sp, unit="binary")
pred_grid = VoxelGrid(pred, sp, unit="binary")

graph = build_graph(skeletonize(gt_grid))
print(f"GT centerline: {len(graph.branches)} branches, {graph.total_length_mm:.1f} mm")
for i, b in enumerate(graph.branches):
    inside = pred[tuple(b.voxel_path.T)].mean()
    print(f"  branch {i}: {b.length_mm:5.1f} mm, {100 * inside:5.1f}% inside prediction")

print(f"TD = {tree_length_detected(graph, pred_grid):.2f}%")
for frac in (0.5, 0.8, 1.0):
    bd, n = branch_detected(graph, pred_grid, MetricParams(branch_detect_fraction=frac))
    print(f"BD at fraction {frac}: {bd:.2f}% ({n} found)")
