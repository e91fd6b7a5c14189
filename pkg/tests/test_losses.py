import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bestta.exceptions import DimensionMismatch, InvalidShape
from bestta.losses import (
    EmbeddingContext,
    LossWeights,
    content_loss,
    entropy_loss,
    l2_reg,
    style_loss_direct,
    style_loss_directional,
    total_loss,
)

from conftest import numeric_grad

R2 = 1 - 1 / math.sqrt(2)


def ctx(e=(0.0, 0.0), e_ad=(1.0, 0.0), src=(1.0, 0.0), ema=(0.0, 0.0)):
    return EmbeddingContext(*(np.asarray(v, dtype=float) for v in (e, e_ad, src, ema)))


def test_directional_style_examples():
    assert style_loss_directional(ctx(e_ad=(2.0, 0.0))).value == pytest.approx(0.0)
    assert style_loss_directional(ctx(e_ad=(0.0, 1.0))).value == pytest.approx(1.0)
    assert style_loss_directional(ctx(e_ad=(-1.0, 0.0))).value == pytest.approx(2.0)


def test_direct_style_examples():
    assert style_loss_direct(ctx(e_ad=(1.0, 0.0))).value == pytest.approx(0.0)
    assert style_loss_direct(ctx(e_ad=(0.0, 3.0))).value == pytest.approx(1.0)
    assert style_loss_direct(ctx(e_ad=(2.0, 0.0), src=(1.0, 1.0))).value == pytest.approx(R2, abs=1e-6)


def test_content_examples():
    assert content_loss(ctx(e=(1.0, 2.0), e_ad=(1.0, 2.0))).value == pytest.approx(0.0)
    assert content_loss(ctx(e=(1.0, 2.0), e_ad=(-1.0, -2.0))).value == pytest.approx(2.0)
    assert content_loss(ctx(e=(1.0, 0.0), e_ad=(1.0, 1.0))).value == pytest.approx(R2, abs=1e-6)


def test_degenerate_directions_are_skipped():
    term = style_loss_directional(ctx(e=(1.0, 1.0), e_ad=(1.0, 1.0)))
    assert term.skipped and term.value == 0.0 and not term.grad.any()
    assert content_loss(ctx(e=(0.0, 0.0))).skipped


def test_context_dimension_check():
    with pytest.raises(DimensionMismatch):
        EmbeddingContext(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2))


def test_entropy_examples():
    assert entropy_loss(np.zeros(10)).value == pytest.approx(math.log(10), abs=1e-9)
    assert entropy_loss(np.array([1000.0, 0, 0, 0])).value == pytest.approx(0.0, abs=1e-9)
    assert entropy_loss(np.array([1.0, 0.0])).value == pytest.approx(0.582203, abs=1e-6)


def test_entropy_reductions():
    z = np.random.default_rng(0).normal(size=(7, 3))
    per = [entropy_loss(row).value for row in z]
    assert entropy_loss(z).value == pytest.approx(np.mean(per))
    assert entropy_loss(z, "sum").value == pytest.approx(np.sum(per))
    with pytest.raises(InvalidShape):
        entropy_loss(np.zeros(1))
    with pytest.raises(InvalidShape):
        entropy_loss(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        entropy_loss(np.zeros(3), "max")


def test_l2_examples():
    assert l2_reg(0.0, 0.0) == (0.0, (0.0, 0.0))
    assert l2_reg(3.0, 4.0)[0] == 7.0
    value, grads = l2_reg(-2.0, 0.5)
    assert value == 2.5 and grads == (-1.0, 1.0)
    value, grads = l2_reg(3.0, -1.0, "squared")
    assert value == 10.0 and grads == (6.0, -2.0)
    with pytest.raises(ValueError):
        l2_reg(1.0, 1.0, "l1")


def test_total_examples():
    ones = {"style": 1.0, "content": 1.0, "entropy": 1.0, "l2": 1.0}
    assert total_loss(ones, LossWeights()).total == pytest.approx(1.64, abs=1e-12)
    assert total_loss(ones, LossWeights(0, 0, 0, 0)).total == 0.0
    rep = total_loss(ones, LossWeights(), skipped=["style"])
    assert rep.total == pytest.approx(1.34, abs=1e-12) and rep.skipped_terms == ["style"]
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0, 0, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=4, max_size=4), st.floats(0.1, 3), st.integers(0, 3))
def test_total_is_linear_in_each_component(vals, k, i):
    from bestta.losses import TERMS

    w = LossWeights()
    base = dict(zip(TERMS, vals))
    bumped = dict(base)
    bumped[TERMS[i]] += k
    diff = total_loss(bumped, w).total - total_loss(base, w).total
    assert diff == pytest.approx(k * w.as_tuple()[i], abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_value_ranges(seed):
    rng = np.random.default_rng(seed)
    c = EmbeddingContext(*rng.normal(size=(4, 5)))
    for fn in (style_loss_directional, style_loss_direct, content_loss):
        assert -1e-12 <= fn(c).value <= 2 + 1e-12
    k = int(rng.integers(2, 9))
    assert 0 <= entropy_loss(rng.normal(size=(3, k)) * 5).value <= math.log(k) + 1e-12


def test_directional_scale_invariance():
    rng = np.random.default_rng(1)
    e, e_ad, src, ema = rng.normal(size=(4, 6))
    a = style_loss_directional(EmbeddingContext(e, e_ad, src, ema))
    scaled_src = ema + 3.7 * (src - ema)
    b = style_loss_directional(EmbeddingContext(e, e_ad, scaled_src, ema))
    assert a.value == pytest.approx(b.value, abs=1e-12)
    assert np.allclose(a.grad, b.grad, atol=1e-12)


@pytest.mark.parametrize("fn", [style_loss_directional, style_loss_direct, content_loss])
def test_cosine_loss_gradients(fn):
    rng = np.random.default_rng(2)
    for _ in range(100):
        e, e_ad, src, ema = rng.normal(size=(4, 6))
        grad = fn(EmbeddingContext(e, e_ad, src, ema)).grad
        num = numeric_grad(lambda v: fn(EmbeddingContext(e, v, src, ema)).value, e_ad, h=1e-5)
        assert np.max(np.abs(grad - num)) <= 1e-5 * max(np.max(np.abs(num)), 1e-3)


@pytest.mark.parametrize("reduction", ["mean", "sum"])
def test_entropy_gradient(reduction):
    rng = np.random.default_rng(3)
    for _ in range(100):
        z = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(2, 6)))) * 2
        grad = entropy_loss(z, reduction).grad
        num = numeric_grad(lambda v: entropy_loss(v, reduction).value, z, h=1e-5)
        assert np.max(np.abs(grad - num)) <= 1e-5 * max(np.max(np.abs(num)), 1e-3)


def test_l2_gradient_away_from_origin():
    rng = np.random.default_rng(4)
    for _ in range(100):
        gs, gm = rng.normal(size=2)
        for variant in ("norm", "squared"):
            _, (ds, dm) = l2_reg(gs, gm, variant)
            h = 1e-6
            ns = (l2_reg(gs + h, gm, variant)[0] - l2_reg(gs - h, gm, variant)[0]) / (2 * h)
            nm = (l2_reg(gs, gm + h, variant)[0] - l2_reg(gs, gm - h, variant)[0]) / (2 * h)
            assert ds == pytest.approx(ns, rel=1e-5) and dm == pytest.approx(nm, rel=1e-5)
