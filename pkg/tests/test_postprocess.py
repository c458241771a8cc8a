import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fixtures import CUT_SPEC, tree
from aerotree import (
    ReconnectParams,
    VoxelGrid,
    build_graph,
    connected_components,
    endpoint_directions,
    identify_main_tree,
    match_segments,
    rasterize_tube,
    refine,
)
from aerotree.errors import EmptyMaskError, ParameterError
from aerotree.postprocess import digital_line
from aerotree.synth import add_noise_blob, cut_branch
from aerotree.topology import Skeleton


def binary(a, spacing=(1.0, 1.0, 1.0)):
    return VoxelGrid(np.asarray(a, dtype=np.uint8), spacing, unit="binary")


def tube_x(length=60, radius=2.5, gap=None, shape=(80, 21, 21)):
    """Solid tube along x, optionally cut by a `gap`-voxel slab in the middle."""
    a = np.zeros(shape, np.uint8)
    i, j, k = np.indices(shape)
    a[((j - 10) ** 2 + (k - 10) ** 2 <= radius**2) & (i >= 10) & (i < 10 + length)] = 1
    if gap:
        mid = 10 + length // 2
        a[mid:mid + gap] = 0
    return binary(a)


def test_params_validation():
    for bad in (dict(search_radius_mm=0), dict(max_angle_deg=95), dict(orientation_window=1),
                dict(max_orientation_variance=-1), dict(max_passes=0)):
        with pytest.raises(ParameterError):
            ReconnectParams(**bad)


@settings(max_examples=80, deadline=None)
@given(st.tuples(*(st.integers(-20, 20),) * 3), st.tuples(*(st.integers(-20, 20),) * 3))
def test_digital_line_is_26_connected(a, b):
    line = digital_line(a, b)
    assert tuple(line[0]) == a and tuple(line[-1]) == b
    if len(line) > 1:
        assert np.abs(np.diff(line, axis=0)).max() == 1


# -- tubes ---------------------------------------------------------------------------


def test_single_voxel_tube():
    out = rasterize_tube([[5, 5, 5]], 1.0, (11, 11, 11), (1.0, 1.0, 1.0))
    want = {(5, 5, 5)} | {(5 + d[0], 5 + d[1], 5 + d[2]) for d in oracles.OFFSETS26 if sum(map(abs, d)) == 1}
    assert {tuple(v) for v in np.argwhere(out)} == want
    assert out.sum() == oracles.count_ball(1.0)


def test_tube_cross_section_is_disk():
    out = rasterize_tube([[2, 10, 10], [30, 10, 10]], 2.0, (33, 21, 21), (1.0, 1.0, 1.0))
    assert int(out[15].sum()) == oracles.count_disk(2.0) == 13


def test_ball_tube_anisotropic():
    sp = (0.5, 0.75, 1.0)
    out = rasterize_tube([[10, 10, 10]], 2.0, (21, 21, 21), sp)
    assert int(out.sum()) == oracles.count_ball(2.0, sp)


def test_tube_outside_grid():
    out = rasterize_tube([[-40, -40, -40], [-30, -40, -40]], 2.0, (10, 10, 10), (1, 1, 1))
    assert not out.any()
    with pytest.raises(ParameterError):
        rasterize_tube([[1, 1, 1]], 0.0, (3, 3, 3), (1, 1, 1))


@settings(max_examples=30, deadline=None)
@given(st.tuples(*(st.integers(2, 17),) * 3), st.tuples(*(st.integers(2, 17),) * 3),
       st.floats(0.3, 3.0))
def test_tube_covers_path(a, b, r):
    path = digital_line(a, b)
    out = rasterize_tube(path, r, (20, 20, 20), (1.0, 1.0, 1.0))
    assert out[tuple(path.T)].all()


# -- directions -----------------------------------------------------------------------


def path_graph(points):
    return build_graph(Skeleton(np.array(points), (40, 40, 40), (1.0, 1.0, 1.0)))


def test_straight_limb_direction():
    g = path_graph([(5 + s, 10, 10) for s in range(15)])
    dirs = {e.voxel: e for e in endpoint_directions(g)}
    hi, lo = dirs[(19, 10, 10)], dirs[(5, 10, 10)]
    np.testing.assert_allclose(hi.direction, [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(lo.direction, [-1, 0, 0], atol=1e-12)
    assert hi.variance_deg2 == pytest.approx(0.0, abs=1e-12)


def test_elbow_has_variance():
    pts = [(10, 10, 5 + s) for s in range(10)] + [(10 + s, 10, 15) for s in range(1, 4)]
    g = path_graph(pts)
    assert len(g.branches) == 1
    tip = [e for e in endpoint_directions(g) if e.voxel == (13, 10, 15)][0]
    assert tip.fittable and tip.variance_deg2 > 0


def test_single_voxel_segment_unfittable():
    g = path_graph([(10, 10, 10)])
    (e,) = endpoint_directions(g)
    assert not e.fittable and e.direction is None


# -- decomposition ----------------------------------------------------------------------


def test_identify_main_tree():
    one = tube_x()
    d = identify_main_tree(one)
    assert d.free_segments == [] and np.array_equal(d.main_mask.samples, one.samples)

    a = np.zeros((60, 60, 30), np.uint8)
    a[0:25, 0:20, 0:20] = 1  # 10000 voxels
    a[40:45, 40:45, 0:8] = 1  # 200 voxels
    d = identify_main_tree(binary(a))
    assert d.sizes[d.main_label - 1] == 10000 and len(d.free_segments) == 1
    assert d.free_segments[0].voxel_count == 200
    with pytest.raises(EmptyMaskError):
        identify_main_tree(binary(np.zeros((3, 3, 3))))


def test_size_tie_goes_superior():
    a = np.zeros((10, 10, 30), np.uint8)
    a[2:5, 2:5, 1:4] = 1
    a[2:5, 2:5, 20:23] = 1
    d = identify_main_tree(binary(a))
    assert d.main_mask.samples[3, 3, 21] == 1


def test_cut_fixture_decomposes():
    t = tree(0, **CUT_SPEC)
    cut = cut_branch(t, 1, 5.0)
    d = identify_main_tree(cut.mask)
    assert len(d.free_segments) == 1
    assert np.array_equal(d.main_mask.samples.astype(bool), cut.main_side)
    assert d.free_segments[0].voxel_count == cut.expected_free_voxels
    assert len(d.free_segments[0].graph.branches) == 3


# -- matching --------------------------------------------------------------------------


def candidates(mask, params=ReconnectParams()):
    d = identify_main_tree(mask)
    look = d.radius.as_dict()
    mains = endpoint_directions(d.main_graph, params, look)
    frees = [(s.label, endpoint_directions(s.graph, params, look)) for s in d.free_segments]
    return match_segments(mains, frees, params, mask.spacing)


def test_collinear_gap_matches_once():
    matches = candidates(tube_x(gap=3))
    assert len(matches) == 1
    m = matches[0]
    assert m.angle_deg <= 30 and m.free_angle_deg <= 30
    assert np.abs(np.diff(m.path, axis=0)).max() == 1


def test_sideways_fragment_not_matched():
    a = np.zeros((60, 60, 21), np.uint8)
    i, j, k = np.indices(a.shape)
    a[((j - 10) ** 2 + (k - 10) ** 2 <= 6.25) & (i >= 5) & (i < 30)] = 1
    a[((i - 36) ** 2 + (k - 10) ** 2 <= 6.25) & (j >= 14) & (j < 40)] = 1
    assert candidates(binary(a)) == []


def test_far_gap_not_matched():
    cut = tube_x(gap=8, length=70, shape=(90, 21, 21))
    assert candidates(cut, ReconnectParams(search_radius_mm=4.0)) == []
    assert len(candidates(cut, ReconnectParams(search_radius_mm=8.0))) == 1


# -- refine ----------------------------------------------------------------------------


def test_refine_intact_tree_is_fixpoint():
    t = tree(2, depth=2)
    r = refine(t.mask)
    assert np.array_equal(r.mask.samples, t.mask.samples)
    assert r.report == {"reconnected": [], "discarded": []}


def test_refine_drops_blob():
    t = tree(2, depth=2)
    noisy, n = add_noise_blob(t, (4.0, 4.0, 4.0), 2.0)
    r = refine(noisy)
    assert np.array_equal(r.mask.samples, t.mask.samples)
    assert r.discarded == [{"voxels": n, "centroid": [4.0, 4.0, 4.0]}]
    assert r.reconnected == []


def test_refine_restores_collinear_tube():
    cut = tube_x(gap=3)
    whole = tube_x()
    r = refine(cut)
    out = r.mask.samples.astype(bool)
    assert len(r.reconnected) == 1 and r.discarded == []
    assert len(connected_components(r.mask)[1]) == 1
    assert np.all(out >= cut.samples.astype(bool))
    # the bridge fills the gap core
    assert out[40:43, 10, 10].all()
    # anything beyond the original tube lies inside the bridge radius
    extra = np.argwhere(out & ~whole.samples.astype(bool))
    r_tube = r.reconnected[0]["tube_radius_mm"]
    assert np.all(np.hypot(extra[:, 1] - 10, extra[:, 2] - 10) <= r_tube + 1e-9)


def test_refine_invariants_on_cut_tree():
    t = tree(1, **CUT_SPEC)
    cut = cut_branch(t, 2, 5.0)
    params = ReconnectParams()
    r = refine(cut.mask, params=params)
    out = r.mask.samples.astype(bool)
    assert len(connected_components(r.mask)[1]) == 1
    assert np.all(out[cut.main_side])
    added = np.argwhere(out & ~cut.mask.samples.astype(bool))
    assert len(r.reconnected) == 1
    rec = r.reconnected[0]
    reach = params.search_radius_mm + rec["tube_radius_mm"]
    ends = np.array([rec["main_endpoint"], rec["free_endpoint"]])
    near = np.linalg.norm(added[:, None, :] - ends[None], axis=2).min(axis=1)
    assert near.max() <= reach + 1e-9
    assert rec["added_voxels"] == len(added)
    again = refine(r.mask)
    assert np.array_equal(again.mask.samples, r.mask.samples)


def test_refine_empty():
    with pytest.raises(EmptyMaskError):
        refine(binary(np.zeros((4, 4, 4))))
    with pytest.raises(ParameterError):
        refine(VoxelGrid(np.zeros((4, 4, 4)), unit="probability"))


def test_one_bridge_per_fragment():
    # fragment between two tree ends: it may be joined to only one of them
    a = np.zeros((90, 21, 21), np.uint8)
    i, j, k = np.indices(a.shape)
    core = (j - 10) ** 2 + (k - 10) ** 2 <= 6.25
    a[core & (i >= 5) & (i < 35)] = 1
    a[core & (i >= 39) & (i < 50)] = 1
    a[core & (i >= 54) & (i < 85)] = 1
    a[5:85, 10, 2] = 1  # a thin rail ties the two outer pieces into one tree
    a[5, 10, 2:10] = 1
    a[84, 10, 2:10] = 1
    r = refine(binary(a))
    assert len(r.reconnected) == 1
