import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bestta.exceptions import DegenerateDirection, DimensionMismatch, InvalidShape
from bestta.tensor import (
    channel_mean,
    channel_std,
    check_feature_map,
    cosine_similarity,
    ema_update,
    global_average_pool,
)

from conftest import numeric_grad

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)
maps = st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)).flatmap(
    lambda s: arrays(np.float64, s, elements=finite))
vectors = st.integers(1, 8).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                       arrays(np.float64, n, elements=finite)))


@pytest.mark.parametrize("fn", [channel_mean, global_average_pool])
def test_mean_examples(fn):
    assert np.allclose(fn(np.full((3, 2, 2), 3.0)), 3.0)
    assert np.allclose(fn(np.array([[[1.0, 3.0]]])), [2.0])
    assert np.allclose(fn(np.arange(1.0, 9.0).reshape(2, 2, 2)), [2.5, 6.5])


def test_std_examples():
    assert np.allclose(channel_std(np.full((2, 3, 3), 7.0), 1e-5), 1e-5)
    assert np.allclose(channel_std(np.array([[[1.0, 3.0]]]), 0.0), [1.0])
    assert np.allclose(channel_std(np.array([[[0.0, 0.0, 2.0, 2.0]]]), 0.0), [1.0])


def test_std_rejects_negative_eps():
    with pytest.raises(ValueError):
        channel_std(np.ones((1, 2, 2)), -1.0)


def test_check_feature_map():
    with pytest.raises(InvalidShape):
        check_feature_map(np.ones((2, 2)))
    with pytest.raises(InvalidShape):
        check_feature_map(np.full((1, 2, 2), np.nan))
    assert check_feature_map(np.ones((2, 1, 2, 2)), allow_batch=True).shape == (2, 1, 2, 2)


@settings(max_examples=60, deadline=None)
@given(maps, st.floats(-5, 5), st.floats(-5, 5))
def test_stats_are_affine_equivariant(x, a, b):
    y = a * x + b
    assert np.allclose(channel_mean(y), a * channel_mean(x) + b, atol=1e-9 * (1 + np.abs(x).max()))
    assert np.allclose(channel_std(y, 0.0), abs(a) * channel_std(x, 0.0), atol=1e-8 * (1 + np.abs(x).max()))


def test_cosine_examples():
    assert cosine_similarity([1, 2], [1, 2])[0] == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1])[0] == pytest.approx(0.0)
    assert cosine_similarity([1, 0], [-1, 0])[0] == pytest.approx(-1.0)


def test_cosine_errors():
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 0], [1, 0, 0])
    with pytest.raises(DegenerateDirection):
        cosine_similarity([0, 0], [1, 0])


@settings(max_examples=80, deadline=None)
@given(vectors, st.floats(0.01, 100))
def test_cosine_properties(ab, k):
    a, b = ab
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    c = cosine_similarity(a, b)[0]
    assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12
    assert c == pytest.approx(cosine_similarity(b, a)[0], abs=1e-12)
    assert c == pytest.approx(cosine_similarity(k * a, b)[0], abs=1e-9)


def test_cosine_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.normal(size=(2, 6))
        g = cosine_similarity(a, b)[1]
        num = numeric_grad(lambda v: cosine_similarity(v, b)[0], a, h=1e-5)
        assert np.max(np.abs(g - num)) <= 1e-5 * max(np.max(np.abs(num)), 1e-3)


def test_ema_examples():
    assert np.allclose(ema_update(np.array([0.0]), np.array([1.0]), 0.99), [0.01])
    A = np.array([0.3, -1.0])
    assert np.allclose(ema_update(A, A, 0.7), A)
    A = np.array([0.0])
    for _ in range(3):
        A = ema_update(A, np.array([1.0]), 0.9)
    assert A[0] == pytest.approx(0.271, abs=1e-12)
    e = np.array([2.0, 3.0])
    out = ema_update(None, e, 0.5)
    assert np.array_equal(out, e) and out is not e


def test_ema_errors():
    with pytest.raises(ValueError):
        ema_update(np.zeros(2), np.zeros(2), 1.0)
    with pytest.raises(DimensionMismatch):
        ema_update(np.zeros(2), np.zeros(3), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.floats(0, 0.999), vectors)
def test_ema_geometric_decay(k, m, ab):
    A0, e = ab
    A = A0
    for _ in range(k):
        A = ema_update(A, e, m)
    expected = m**k * np.linalg.norm(A0 - e)
    assert np.linalg.norm(A - e) == pytest.approx(expected, rel=1e-9, abs=1e-9)
