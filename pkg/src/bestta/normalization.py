"""Normalization layers: frozen BN, sample-statistics BN, AdaIN and BeIN.

Channel vectors broadcast against the channel axis ``-3`` so every forward
works on a single ``(C, H, W)`` map and on a ``(N, C, H, W)`` batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import (
    DegenerateDenominator,
    DimensionMismatch,
    InvalidShape,
    NonPositiveStyleSigma,
    StaleCache,
)
from .tensor import STD_EPS, channel_mean, channel_std

DEN_EPS = 1e-6


def _col(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)[:, None, None]


def _check_channels(x: np.ndarray, *vectors) -> None:
    c = x.shape[-3]
    for v in vectors:
        if np.shape(v) != (c,):
            raise DimensionMismatch(f"channel vector of shape {np.shape(v)} for {c}-channel map")


@dataclass
class FrozenBatchNorm:
    alpha: np.ndarray
    beta: np.ndarray
    mu_s: np.ndarray
    sigma_s: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "beta", "mu_s", "sigma_s"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        shapes = {self.alpha.shape, self.beta.shape, self.mu_s.shape, self.sigma_s.shape}
        if len(shapes) != 1 or self.alpha.ndim != 1:
            raise DimensionMismatch(f"BN fields have inconsistent shapes {sorted(shapes)}")
        if not np.all(self.sigma_s > 0):
            raise ValueError("running std must be strictly positive")

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]

    @classmethod
    def identity(cls, channels: int) -> "FrozenBatchNorm":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))


def bn_forward(x, p: FrozenBatchNorm) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_channels(x, p.alpha)
    return _col(p.alpha) * (x - _col(p.mu_s)) / _col(p.sigma_s) + _col(p.beta)


def tent_forward(x, alpha_p, beta_p, eps: float = STD_EPS) -> np.ndarray:
    """Normalize with the sample statistics of ``x`` and apply ``(alpha_p, beta_p)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_channels(x, alpha_p, beta_p)
    mu = channel_mean(x)[..., None, None]
    sd = channel_std(x, eps)[..., None, None]
    return _col(alpha_p) * (x - mu) / sd + _col(beta_p)


def adain(x, style_mu, style_sigma, eps: float = STD_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    style_sigma = np.asarray(style_sigma, dtype=np.float64)
    _check_channels(x, style_mu, style_sigma)
    if not np.all(style_sigma > 0):
        raise NonPositiveStyleSigma("style sigma must be strictly positive")
    mu = channel_mean(x)[..., None, None]
    sd = channel_std(x, eps)[..., None, None]
    return _col(style_sigma) * (x - mu) / sd + _col(style_mu)


@dataclass
class BeINLayer:
    """Learnable scalars ``gamma_sigma``/``gamma_mu`` blending sample and anchor stats.

    With ``per_channel=True`` the two gammas are vectors of length C instead.
    """

    anchor_mu: np.ndarray
    anchor_sigma: np.ndarray
    rho: float = 0.7
    gamma_sigma: float | np.ndarray = 0.0
    gamma_mu: float | np.ndarray = 0.0
    per_channel: bool = False

    def __post_init__(self):
        self.anchor_mu = np.asarray(self.anchor_mu, dtype=np.float64)
        self.anchor_sigma = np.asarray(self.anchor_sigma, dtype=np.float64)
        if self.anchor_mu.shape != self.anchor_sigma.shape or self.anchor_mu.ndim != 1:
            raise DimensionMismatch("anchor vectors must be 1-d and of equal length")
        if not np.all(self.anchor_sigma > 0):
            raise ValueError("anchor sigma must be strictly positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.per_channel:
            c = self.channels
            self.gamma_sigma = np.broadcast_to(np.asarray(self.gamma_sigma, dtype=np.float64), (c,)).copy()
            self.gamma_mu = np.broadcast_to(np.asarray(self.gamma_mu, dtype=np.float64), (c,)).copy()
        else:
            self.gamma_sigma = float(self.gamma_sigma)
            self.gamma_mu = float(self.gamma_mu)
        if not (np.all(np.isfinite(self.gamma_sigma)) and np.all(np.isfinite(self.gamma_mu))):
            raise ValueError("gammas must be finite")

    @property
    def channels(self) -> int:
        return self.anchor_mu.shape[0]

    def with_gammas(self, gamma_sigma, gamma_mu) -> "BeINLayer":
        return replace(self, gamma_sigma=gamma_sigma, gamma_mu=gamma_mu)


@dataclass
class BeINCache:
    x: np.ndarray
    mu_x: np.ndarray
    sigma_x: np.ndarray
    sigma_t_hat: np.ndarray
    mu_t_hat: np.ndarray
    layer: BeINLayer = field(repr=False)


def bein_estimate_sigma(sigma_x, layer: BeINLayer, den_eps: float = DEN_EPS) -> np.ndarray:
    sigma_x = np.asarray(sigma_x, dtype=np.float64)
    if not np.all(sigma_x > 0):
        raise ValueError("sample sigma must be strictly positive")
    s = layer.anchor_sigma
    den = layer.rho * s + (1.0 - layer.rho) * sigma_x + layer.gamma_sigma
    if np.any(den <= den_eps):
        raise DegenerateDenominator(f"min denominator {float(np.min(den)):.3g} <= {den_eps:g}")
    return s * sigma_x / den


def bein_estimate_mu(mu_x, sigma_x, sigma_t_hat, layer: BeINLayer) -> np.ndarray:
    mu_x = np.asarray(mu_x, dtype=np.float64)
    sigma_x = np.asarray(sigma_x, dtype=np.float64)
    sigma_t_hat = np.asarray(sigma_t_hat, dtype=np.float64)
    if not (mu_x.shape == sigma_x.shape == sigma_t_hat.shape == layer.anchor_mu.shape):
        raise DimensionMismatch("BeIN mean estimator inputs differ in length")
    rho = layer.rho
    return (rho * sigma_t_hat / sigma_x * mu_x
            + (1.0 - rho) * sigma_t_hat / layer.anchor_sigma * layer.anchor_mu
            + layer.gamma_mu)


def bein_forward(x, layer: BeINLayer, eps: float = STD_EPS) -> tuple[np.ndarray, BeINCache]:
    """Re-normalize ``x`` from the estimated target style to the source anchor."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidShape(f"BeIN operates on a single (C, H, W) map, got {x.shape}")
    _check_channels(x, layer.anchor_mu)
    mu_x = channel_mean(x)
    sigma_x = channel_std(x, eps)
    sigma_t = bein_estimate_sigma(sigma_x, layer)
    mu_t = bein_estimate_mu(mu_x, sigma_x, sigma_t, layer)
    out = _col(layer.anchor_sigma) * (x - _col(mu_t)) / _col(sigma_t) + _col(layer.anchor_mu)
    return out, BeINCache(x, mu_x, sigma_x, sigma_t, mu_t, layer)


def bein_backward(cache: BeINCache, upstream) -> tuple:
    """Gradient of a scalar loss w.r.t. ``(gamma_sigma, gamma_mu)`` given dL/d(output)."""
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.x.shape:
        raise StaleCache(f"upstream {g.shape} does not match cached input {cache.x.shape}")
    layer = cache.layer
    s_bar, m_bar, rho = layer.anchor_sigma, layer.anchor_mu, layer.rho
    sig_t, mu_t = cache.sigma_t_hat, cache.mu_t_hat

    g_sum = g.sum(axis=(-2, -1))
    gx_sum = (g * cache.x).sum(axis=(-2, -1))
    # out = s_bar * (x - mu_t) / sig_t + m_bar
    d_mu_t = -s_bar / sig_t * g_sum
    d_sig_t = -s_bar / sig_t**2 * (gx_sum - mu_t * g_sum)
    d_sig_t = d_sig_t + d_mu_t * (rho * cache.mu_x / cache.sigma_x + (1.0 - rho) * m_bar / s_bar)
    d_gamma_sigma = d_sig_t * (-sig_t**2 / (s_bar * cache.sigma_x))
    if layer.per_channel:
        return d_gamma_sigma, d_mu_t
    return float(d_gamma_sigma.sum()), float(d_mu_t.sum())
