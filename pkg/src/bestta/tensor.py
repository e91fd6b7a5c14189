"""Channel statistics, pooling, cosine geometry and EMA on float64 arrays.

Feature maps are plain ``numpy`` arrays shaped ``(C, H, W)``. Functions that
reduce over the spatial axes also accept a leading batch axis, which the
model code uses during pretraining.
"""
from __future__ import annotations

import numpy as np

from .exceptions import DegenerateDirection, DimensionMismatch, InvalidShape

STD_EPS = 1e-5
VEC_EPS = 1e-12


def check_feature_map(x, *, allow_batch: bool = False) -> np.ndarray:
    """Validate and convert ``x`` to a finite float64 ``(C, H, W)`` array."""
    x = np.asarray(x, dtype=np.float64)
    ndims = (3, 4) if allow_batch else (3,)
    if x.ndim not in ndims:
        raise InvalidShape(f"expected a {'/'.join(map(str, ndims))}-d feature map, got shape {x.shape}")
    if min(x.shape) < 1:
        raise InvalidShape(f"empty feature map with shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidShape("feature map contains non-finite values")
    return x


def check_vector(v, dim: int | None = None, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidShape(f"{name} must be 1-d, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionMismatch(f"{name} has length {v.shape[0]}, expected {dim}")
    return v


def channel_mean(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=(-2, -1))


def channel_std(x, eps: float = STD_EPS) -> np.ndarray:
    """Population standard deviation per channel, floored at ``eps``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x.std(axis=(-2, -1)), eps)


def global_average_pool(x) -> np.ndarray:
    return channel_mean(x)


def cosine_similarity(a, b, eps: float = VEC_EPS) -> tuple[float, np.ndarray]:
    """Cosine of the angle between ``a`` and ``b`` and its gradient w.r.t. ``a``.

    Raises DegenerateDirection when either norm is at most ``eps`` so callers
    can drop the term instead of propagating NaN.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cosine of shapes {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= eps or nb <= eps:
        raise DegenerateDirection(f"norms {na:.3g}, {nb:.3g} at or below {eps:g}")
    cos = float(a @ b) / (na * nb)
    grad = b / (na * nb) - cos * a / (na * na)
    return cos, grad


def ema_update(A, e, m: float) -> np.ndarray:
    """Return ``m * A + (1 - m) * e``; an uninitialized ``A`` (None) yields ``e``."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1), got {m}")
    e = np.asarray(e, dtype=np.float64)
    if A is None:
        return e.copy()
    A = np.asarray(A, dtype=np.float64)
    if A.shape != e.shape:
        raise DimensionMismatch(f"EMA state {A.shape} vs update {e.shape}")
    return m * A + (1.0 - m) * e
