"""Style, content, entropy and L2 losses with analytic gradients.

Cosine losses differentiate only through the adapted embedding ``E'(x)``.
A term whose direction vector has (near) zero norm is reported as skipped
with value 0 and a zero gradient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import DegenerateDirection, DimensionMismatch, InvalidShape
from .tensor import VEC_EPS, cosine_similarity

TERMS = ("style", "content", "entropy", "l2")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.3
    lambda2: float = 1.0
    lambda3: float = 0.3
    lambda4: float = 0.04

    def __post_init__(self):
        for v in self.as_tuple():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weights must be finite and non-negative, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def weight(self, term: str) -> float:
        return self.as_tuple()[TERMS.index(term)]


@dataclass
class EmbeddingContext:
    e_unadapted: np.ndarray
    e_adapted: np.ndarray
    e_source_mean: np.ndarray
    e_ema: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(v) for v in (self.e_unadapted, self.e_adapted, self.e_source_mean, self.e_ema)}
        if len(shapes) != 1:
            raise DimensionMismatch(f"embedding context has mixed shapes {sorted(shapes)}")


class LossTerm(NamedTuple):
    value: float
    grad: np.ndarray
    skipped: bool = False


@dataclass
class LossReport:
    style: float = 0.0
    content: float = 0.0
    entropy: float = 0.0
    l2: float = 0.0
    total: float = 0.0
    skipped_terms: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _one_minus_cos(u, v, eps: float) -> LossTerm:
    """``1 - cos(u, v)`` with the gradient taken w.r.t. ``v``."""
    try:
        cos, grad_v = cosine_similarity(v, u, eps)
    except DegenerateDirection:
        return LossTerm(0.0, np.zeros(np.shape(v)), True)
    return LossTerm(1.0 - cos, -grad_v)


def style_loss_directional(ctx: EmbeddingContext, eps: float = VEC_EPS) -> LossTerm:
    """``1 - cos(E_src - A, E' - E)``; the gradient is w.r.t. ``E'``."""
    target_dir = np.asarray(ctx.e_source_mean) - np.asarray(ctx.e_ema)
    adapt_dir = np.asarray(ctx.e_adapted) - np.asarray(ctx.e_unadapted)
    return _one_minus_cos(target_dir, adapt_dir, eps)


def style_loss_direct(ctx: EmbeddingContext, eps: float = VEC_EPS) -> LossTerm:
    return _one_minus_cos(np.asarray(ctx.e_source_mean), np.asarray(ctx.e_adapted), eps)


def content_loss(ctx: EmbeddingContext, eps: float = VEC_EPS) -> LossTerm:
    return _one_minus_cos(np.asarray(ctx.e_unadapted), np.asarray(ctx.e_adapted), eps)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy_loss(logits, reduction: str = "mean") -> LossTerm:
    """Shannon entropy of the softmax, reduced over positions.

    ``logits`` is ``(K,)`` for one position or ``(P, K)`` for P positions.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] < 2 or z.size == 0:
        raise InvalidShape(f"entropy needs >= 1 position and >= 2 classes, got shape {z.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    logp = log_softmax(z)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1)
    grad = -p * (logp + h[..., None])
    if z.ndim == 2 and reduction == "mean":
        n = z.shape[0]
        return LossTerm(float(h.mean()), grad / n)
    return LossTerm(float(np.sum(h)), grad)


def l2_reg(gamma_sigma, gamma_mu, variant: str = "norm") -> tuple[float, tuple]:
    """``||gamma_mu|| + ||gamma_sigma||`` (or the squared variant) and its (sub)gradients.

    Returns ``(value, (d_gamma_sigma, d_gamma_mu))``; the subgradient at 0 is 0.
    """
    if variant not in ("norm", "squared"):
        raise ValueError(f"unknown l2 variant {variant!r}")
    value = 0.0
    grads = []
    for g in (gamma_sigma, gamma_mu):
        arr = np.asarray(g, dtype=np.float64)
        if variant == "squared":
            value += float(np.sum(arr**2))
            grad = 2.0 * arr
        else:
            n = float(np.linalg.norm(arr))
            value += n
            grad = arr / n if n > 0 else np.zeros_like(arr)
        grads.append(float(grad) if arr.ndim == 0 else grad)
    return value, tuple(grads)


def total_loss(terms: dict, w: LossWeights, skipped=()) -> LossReport:
    """Weighted sum of the component values; skipped terms contribute zero."""
    skipped = [t for t in TERMS if t in set(skipped)]
    values = {t: float(terms.get(t, 0.0)) for t in TERMS}
    total = sum(w.weight(t) * values[t] for t in TERMS if t not in skipped)
    return LossReport(**values, total=total, skipped_terms=skipped)
