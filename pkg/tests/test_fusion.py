import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aerotree import FusionParams, VoxelGrid, ensemble_max, threshold
from aerotree.errors import ParameterError, ShapeError

SHAPE = (4, 3, 5)
prob = arrays(np.float32, SHAPE, elements=st.floats(0, 1, width=32))


def pm(a):
    return VoxelGrid(a, unit="probability")


def test_max_example():
    a = pm(np.full((1, 1, 1), 0.2))
    b = pm(np.full((1, 1, 1), 0.7))
    assert ensemble_max([a, b]).samples[0, 0, 0] == np.float32(0.7)


def test_single_input_identity():
    a = pm(np.random.default_rng(0).random(SHAPE))
    assert np.array_equal(ensemble_max([a]).samples, a.samples)


def test_rejects_bad_inputs():
    with pytest.raises(ParameterError):
        ensemble_max([])
    with pytest.raises(ShapeError):
        ensemble_max([pm(np.zeros((2, 2, 2))), pm(np.zeros((2, 2, 3)))])
    with pytest.raises(ParameterError):
        FusionParams(threshold=1.0)


def test_threshold_boundary():
    a = pm(np.array([0.5, 0.4999, 0.0, 1.0], dtype=np.float32).reshape(4, 1, 1))
    out = threshold(a, FusionParams(0.5))
    assert out.is_binary
    assert out.samples.ravel().tolist() == [1, 0, 0, 1]
    assert not threshold(pm(np.zeros(SHAPE))).samples.any()


@settings(max_examples=60, deadline=None)
@given(prob, prob, prob)
def test_max_laws(a, b, c):
    A, B, C = pm(a), pm(b), pm(c)
    ref = ensemble_max([A, B, C]).samples
    for order in ([B, A, C], [C, B, A], [A, C, B]):
        assert np.array_equal(ensemble_max(order).samples, ref)
    left = ensemble_max([ensemble_max([A, B]), C]).samples
    right = ensemble_max([A, ensemble_max([B, C])]).samples
    assert np.array_equal(left, ref) and np.array_equal(right, ref)
    assert np.array_equal(ensemble_max([A, A]).samples, a)


@settings(max_examples=60, deadline=None)
@given(prob, prob, st.floats(0.01, 0.99))
def test_fused_mask_contains_members(a, b, t):
    params = FusionParams(t)
    fused = threshold(ensemble_max([pm(a), pm(b)]), params).samples
    for m in (a, b):
        assert np.all(fused >= threshold(pm(m), params).samples)


@settings(max_examples=40, deadline=None)
@given(prob, prob, st.floats(0.01, 0.98), st.floats(0.0, 0.01))
def test_monotone(a, b, t, dt):
    grown = np.maximum(a, b)
    assert np.all(ensemble_max([pm(grown), pm(b)]).samples >= ensemble_max([pm(a), pm(b)]).samples)
    low = threshold(pm(a), FusionParams(t)).samples
    high = threshold(pm(a), FusionParams(t + dt)).samples
    assert np.all(high <= low)
