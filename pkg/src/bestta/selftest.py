"""Fast invariant checks run by ``bestta selftest``.

Each check returns ``(name, passed, detail)``. The suites are small versions
of the property tests so they finish in a couple of seconds without pytest.
"""
from __future__ import annotations

import math

import numpy as np

from .losses import EmbeddingContext, LossWeights, content_loss, entropy_loss, style_loss_directional, total_loss
from .normalization import BeINLayer, bein_backward, bein_forward
from .tensor import channel_mean, channel_std


def _random_layer(rng, c, rho, gs=0.0, gm=0.0):
    return BeINLayer(rng.normal(size=c), rng.uniform(0.5, 2.0, size=c), rho, gs, gm)


def check_reductions(n: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst_id = worst_inst = 0.0
    for _ in range(n):
        c, h, w = rng.integers(1, 6, size=3) + np.array([0, 1, 1])
        x = rng.normal(rng.normal(), rng.uniform(0.2, 3.0), size=(c, h, w))
        y, _ = bein_forward(x, _random_layer(rng, c, 0.0))
        worst_id = max(worst_id, float(np.max(np.abs(y - x))))
        layer = _random_layer(rng, c, 1.0)
        y, _ = bein_forward(x, layer)
        err = max(np.max(np.abs(channel_mean(y) - layer.anchor_mu)),
                  np.max(np.abs(channel_std(y, 0.0) - layer.anchor_sigma)))
        worst_inst = max(worst_inst, float(err))
    ok = bool(worst_id <= 1e-9 and worst_inst <= 1e-6)
    return "bein reductions", ok, f"identity {worst_id:.2e}, instance {worst_inst:.2e}"


def check_bein_gradient(n: int = 30, seed: int = 1, h: float = 1e-4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        c = int(rng.integers(1, 5))
        x = rng.normal(size=(c, 3, 4))
        g = rng.normal(size=x.shape)
        layer = _random_layer(rng, c, rng.uniform(0, 1), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2))
        _, cache = bein_forward(x, layer)
        ana = bein_backward(cache, g)
        for i in range(2):
            def f(delta):
                gs = layer.gamma_sigma + (delta if i == 0 else 0.0)
                gm = layer.gamma_mu + (delta if i == 1 else 0.0)
                return float(np.sum(g * bein_forward(x, layer.with_gammas(gs, gm))[0]))
            num = (f(h) - f(-h)) / (2 * h)
            worst = max(worst, abs(ana[i] - num) / max(abs(num), 1e-8))
    return "bein backward", bool(worst <= 1e-4), f"max rel err {worst:.2e}"


def check_loss_gradients(n: int = 30, seed: int = 2, h: float = 1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        e, e2, s, a = rng.normal(size=(4, 6))
        for fn in (style_loss_directional, content_loss):
            grad = fn(EmbeddingContext(e, e2, s, a)).grad
            for j in range(6):
                d = np.zeros(6)
                d[j] = h
                num = (fn(EmbeddingContext(e, e2 + d, s, a)).value - fn(EmbeddingContext(e, e2 - d, s, a)).value) / (2 * h)
                worst = max(worst, abs(grad[j] - num) / max(abs(num), 1e-6))
        z = rng.normal(size=(5, 4))
        grad = entropy_loss(z).grad
        for j in np.ndindex(z.shape):
            d = np.zeros_like(z)
            d[j] = h
            num = (entropy_loss(z + d).value - entropy_loss(z - d).value) / (2 * h)
            worst = max(worst, abs(grad[j] - num) / max(abs(num), 1e-6))
    return "loss gradients", bool(worst <= 1e-4), f"max rel err {worst:.2e}"


def check_exact_values():
    h = entropy_loss(np.zeros(10)).value
    tot = total_loss({"style": 1.0, "content": 1.0, "entropy": 1.0, "l2": 1.0}, LossWeights()).total
    layer = BeINLayer(np.array([0.0]), np.array([2.0]), 0.7)
    y, cache = bein_forward(np.array([[[4.0, 6.0]]]), layer)
    errs = [abs(h - math.log(10)), abs(tot - 1.64), abs(cache.sigma_t_hat[0] - 2 / 1.7),
            abs(cache.mu_t_hat[0] - 0.7 * 5 * 2 / 1.7), float(np.max(np.abs(y.ravel() - [-0.2, 3.2])))]
    return "exact values", bool(errs[0] <= 1e-9 and errs[1] <= 1e-12 and max(errs[2:]) <= 1e-6), \
        f"max err {max(errs):.2e}"


CHECKS = (check_reductions, check_bein_gradient, check_loss_gradients, check_exact_values)


def run_all() -> list[tuple[str, bool, str]]:
    return [check() for check in CHECKS]
