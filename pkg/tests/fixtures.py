"""Synthetic fixture families shared by several test modules."""
from __future__ import annotations

import numpy as np

from aerotree.errors import ParameterError, SpecError
from aerotree.synth import SynthTreeSpec, cut_branch, displace_fragment, generate

# Long, thin branches: the stubs either side of a cut stay longer than their
# own inscribed radius and survive spur pruning.
CUT_SPEC = dict(dims=(96, 96, 96), root_length_mm=30, root_radius_mm=3,
                length_decay=0.85, radius_decay=0.7, depth=2)

TOPOLOGY_SPECS = [
    (0, dict(dims=(64, 64, 64), root_length_mm=30, root_radius_mm=4)),
    (1, dict(dims=(64, 64, 64), root_length_mm=24, root_radius_mm=3.5)),
    (2, dict(dims=(64, 64, 64), root_length_mm=22, root_radius_mm=3)),
    (3, dict(dims=(96, 96, 96), root_length_mm=28, root_radius_mm=3.5,
             length_decay=0.8, radius_decay=0.8)),
    (4, dict(dims=(128, 128, 128), root_length_mm=30, root_radius_mm=4,
             length_decay=0.8, radius_decay=0.8)),
]


def tree(seed=0, **kw):
    return generate(SynthTreeSpec(seed=seed, **kw))


def random_tree(rng: np.random.Generator, depth=None):
    """A tree of depth 0..3 on a 64..128 cube grid, with random shape factors.

    Draws until the layout fits the grid.
    """
    fixed = depth
    while True:
        depth = int(rng.integers(0, 4)) if fixed is None else fixed
        n = int(rng.integers(64, 129))
        spacing = float(rng.choice([0.75, 1.0, 1.25]))
        extent = n * spacing
        spec = SynthTreeSpec(
            seed=int(rng.integers(0, 2**31)),
            depth=depth,
            dims=(n, n, n),
            spacing=(spacing,) * 3,
            root_length_mm=float(extent * rng.uniform(0.18, 0.3)),
            root_radius_mm=float(extent * rng.uniform(0.035, 0.06)),
            length_decay=float(rng.uniform(0.7, 0.9)),
            radius_decay=float(rng.uniform(0.7, 0.85)),
            branch_angle_deg=float(rng.uniform(30, 45)),
        )
        try:
            return generate(spec)
        except SpecError:
            continue


def cut_gap(branch) -> float:
    return float(np.clip(0.3 * branch.length_mm, 3.0, 8.0))


def cut_family(seeds=range(5), branch_ids=range(1, 7)):
    """(truth, cut) pairs with a collinear gap in one non-root branch."""
    for seed in seeds:
        t = tree(seed, **CUT_SPEC)
        for bid in branch_ids:
            yield t, cut_branch(t, bid, cut_gap(t.branches[bid]))


def perpendicular_shift(branch, clearance=4.0, angle=0.0):
    """Sideways-and-back shift that leaves the fragment parallel but offset.

    The fragment ends up beside its stump, ~2r + clearance away sideways and
    pulled back by the same amount, so its tip faces the stump at ~90 deg.
    """
    u = branch.direction
    a = np.cross(u, [1.0, 0.0, 0.0])
    if np.linalg.norm(a) < 0.5:
        a = np.cross(u, [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(u, a)
    side = np.cos(angle) * a + np.sin(angle) * b
    reach = 2 * branch.radius_mm + clearance
    return np.round(side * reach - u * reach).astype(int)


def perpendicular_family(seeds=range(5), branch_ids=range(3, 7), gap_mm=4.0):
    """(truth, cut, displaced mask) triples; terminal branches only."""
    for seed in seeds:
        t = tree(seed, **CUT_SPEC)
        for bid in branch_ids:
            b = t.branches[bid]
            cut = cut_branch(t, bid, gap_mm)
            for angle in np.linspace(0, 2 * np.pi, 8, endpoint=False):
                try:
                    moved = displace_fragment(cut, perpendicular_shift(b, angle=angle))
                except ParameterError:
                    continue
                yield t, cut, moved
                break
