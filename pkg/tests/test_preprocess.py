import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from fixtures import tree
from aerotree import (
    BoundingBox,
    PreprocessParams,
    VoxelGrid,
    clip_normalize,
    clip_trachea_at_lung_top,
    crop,
    lung_bbox,
    resample_isotropic,
)
from aerotree.errors import BoundsError, EmptyMaskError, ParameterError
from aerotree.synth import lung_surrogate
from aerotree.volume import world_of


def hu(values):
    return VoxelGrid(np.asarray(values, dtype=float).reshape(-1, 1, 1))


def test_clip_normalize_examples():
    out = clip_normalize(hu([-1024, 1024, 0, -3000, 5000])).samples.ravel()
    assert out.tolist() == [0.0, 1.0, 0.5, 0.0, 1.0]


def test_clip_normalize_output_tag():
    assert clip_normalize(hu([0])).unit == "probability"
    with pytest.raises(ParameterError):
        clip_normalize(VoxelGrid(np.zeros((1, 1, 1)), unit="probability"))


def test_params_validated():
    with pytest.raises(ParameterError):
        PreprocessParams(clip_low=5, clip_high=5)
    with pytest.raises(ParameterError):
        PreprocessParams(target_spacing=0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-5000, 5000)))
def test_clip_normalize_monotone_and_bounded(v):
    v = np.sort(v)
    out = clip_normalize(hu(v)).samples.ravel()
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= 0 and out.max() <= 1


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 10, elements=st.floats(-3000, 3000)))
def test_clip_normalize_idempotent_on_unit_range(v):
    unit = PreprocessParams(clip_low=0.0, clip_high=1.0)
    once = clip_normalize(hu(v), unit)
    twice = clip_normalize(once.with_samples(once.samples, unit="HU"), unit)
    assert np.array_equal(once.samples, twice.samples)


def test_resample_constant():
    g = VoxelGrid(np.full((10, 7, 5), 42.0), (0.5, 0.9, 1.7))
    out = resample_isotropic(g, 0.75)
    assert out.dims == (7, 8, 11)
    assert out.spacing == (0.75, 0.75, 0.75)
    assert np.all(out.samples == 42.0)


def test_resample_identity():
    rng = np.random.default_rng(0)
    g = VoxelGrid(rng.normal(size=(6, 6, 6)), (0.75,) * 3)
    np.testing.assert_allclose(resample_isotropic(g, 0.75).samples, g.samples, atol=1e-6)


@pytest.mark.parametrize("source, target", [(0.5, 1.0), (0.6, 0.75), (1.0, 0.75)])
def test_resample_linear_ramp(source, target):
    n = 40
    ramp = np.broadcast_to(np.arange(n, dtype=float)[:, None, None], (n, 3, 3))
    out = resample_isotropic(VoxelGrid(ramp, (source,) * 3), target)
    for o in range(1, out.dims[0] - 1):
        want = oracles.trilinear_ramp(o, target, source, n)
        assert abs(out.samples[o, 1, 1] - want) <= 1e-5


def test_resample_dims_round_half_away():
    g = VoxelGrid(np.zeros((3, 5, 1)), (0.25, 0.25, 0.25))
    # 0.75/0.5 = 1.5 -> 2 ; 1.25/0.5 = 2.5 -> 3 ; 0.25/0.5 = 0.5 -> 1
    assert resample_isotropic(g, 0.5).dims == (2, 3, 1)


def test_resample_mask_rules():
    m = VoxelGrid(np.random.default_rng(3).integers(0, 2, (9, 9, 9)), (0.5, 0.5, 1.0), unit="binary")
    with pytest.raises(ParameterError):
        resample_isotropic(m, 0.75)
    out = resample_isotropic(m, 0.75, mode="nearest")
    assert out.is_binary and set(np.unique(out.samples)) <= {0, 1}
    with pytest.raises(ParameterError):
        resample_isotropic(m, -1, mode="nearest")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), sp=st.tuples(*(st.floats(0.3, 2.0),) * 3))
def test_nearest_preserves_value_set(seed, sp):
    rng = np.random.default_rng(seed)
    values = rng.choice([-1000.0, 0.0, 40.0, 700.0], size=(7, 6, 5))
    out = resample_isotropic(VoxelGrid(values, sp), 0.75, mode="nearest")
    assert set(np.unique(out.samples)) <= set(np.unique(values.astype(np.float32)))


def test_resample_keeps_origin():
    aff = np.diag([0.5, 0.5, 2.0, 1.0])
    aff[:3, 3] = (10, -4, 7)
    out = resample_isotropic(VoxelGrid(np.zeros((8, 8, 4)), affine=aff), 1.0)
    assert world_of(out, (0, 0, 0)) == (10.0, -4.0, 7.0)
    assert world_of(out, (1, 1, 1)) == (11.0, -3.0, 8.0)


def test_lung_bbox_examples():
    m = np.zeros((30, 30, 30), np.uint8)
    m[10:21, 10:21, 10:21] = 1
    g = VoxelGrid(m, unit="binary")
    assert lung_bbox(g) == BoundingBox((10, 10, 10), (20, 20, 20))
    assert lung_bbox(g, 2) == BoundingBox((8, 8, 8), (22, 22, 22))
    assert lung_bbox(g, 50) == BoundingBox((0, 0, 0), (29, 29, 29))
    one = np.zeros((10, 10, 10), np.uint8)
    one[5, 6, 7] = 1
    assert lung_bbox(VoxelGrid(one, unit="binary")) == BoundingBox((5, 6, 7), (5, 6, 7))
    with pytest.raises(EmptyMaskError):
        lung_bbox(VoxelGrid(np.zeros((3, 3, 3)), unit="binary"))


def test_crop_examples():
    rng = np.random.default_rng(5)
    aff = np.diag([0.8, 0.8, 1.2, 1.0])
    aff[:3, 3] = (-50, 20, 3)
    g = VoxelGrid(rng.normal(size=(6, 7, 8)), affine=aff)
    full = crop(g, BoundingBox((0, 0, 0), (5, 6, 7)))
    assert np.array_equal(full.samples, g.samples)
    np.testing.assert_allclose(full.affine, g.affine)
    one = crop(g, BoundingBox((2, 3, 4), (2, 3, 4)))
    assert one.dims == (1, 1, 1) and one.samples[0, 0, 0] == g.samples[2, 3, 4]
    box = BoundingBox((1, 2, 3), (4, 6, 7))
    c = crop(g, box)
    for v in [(0, 0, 0), (3, 4, 4), (1, 2, 0)]:
        src = tuple(a + b for a, b in zip(v, box.min))
        assert world_of(c, v) == pytest.approx(world_of(g, src))
        assert c.samples[v] == g.samples[src]
    with pytest.raises(BoundsError):
        crop(g, BoundingBox((0, 0, 0), (6, 0, 0)))


def masks(airway, lung):
    return VoxelGrid(airway, unit="binary"), VoxelGrid(lung, unit="binary")


def test_clip_trachea_by_slice():
    air = np.zeros((5, 5, 120), np.uint8)
    air[2, 2, [95, 100, 101, 110]] = 1
    lung = np.zeros_like(air)
    lung[:, :, 20:101] = 1
    out = clip_trachea_at_lung_top(*masks(air, lung)).samples
    assert out[2, 2, 95] == 1 and out[2, 2, 100] == 1
    assert out[2, 2, 101] == 0 and out[2, 2, 110] == 0


def test_clip_trachea_identity_below_top():
    air = np.zeros((5, 5, 30), np.uint8)
    air[1:3, 1:3, 2:10] = 1
    lung = np.zeros_like(air)
    lung[:, :, :12] = 1
    out = clip_trachea_at_lung_top(*masks(air, lung))
    assert np.array_equal(out.samples, air)


def test_clip_trachea_follows_superior_axis():
    # voxel axis 0 points down in world z: "above" means smaller i
    aff = np.array([[0, 1.0, 0, 0], [0, 0, 1.0, 0], [-1.0, 0, 0, 0], [0, 0, 0, 1]])
    air = np.zeros((10, 3, 3), np.uint8)
    air[:, 1, 1] = 1
    lung = np.zeros_like(air)
    lung[4:, :, :] = 1
    out = clip_trachea_at_lung_top(VoxelGrid(air, affine=aff, unit="binary"),
                                   VoxelGrid(lung, affine=aff, unit="binary"))
    assert out.samples[:, 1, 1].tolist() == [0, 0, 0, 0] + [1] * 6


def test_clip_trachea_empty_lung():
    with pytest.raises(EmptyMaskError):
        clip_trachea_at_lung_top(*masks(np.ones((2, 2, 2)), np.zeros((2, 2, 2))))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_clip_trachea_removes_stub(seed):
    t = tree(seed, depth=2)
    lung = lung_surrogate(t, stub_mm=8.0)
    air = t.mask.samples
    expected = int(air.sum()) - int(oracles.clip_above(air, lung.samples).sum())
    assert expected > 0
    out = clip_trachea_at_lung_top(t.mask, lung)
    assert int(out.samples.sum()) == int(air.sum()) - expected
    # nothing at or below the lung top changed, nothing was added
    assert np.all(out.samples <= air)
    assert np.array_equal(out.samples, oracles.clip_above(air, lung.samples))
