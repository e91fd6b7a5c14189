"""Online single-image continual adaptation with a BeIN layer.

``BESTTA`` wraps the pieces below in the familiar estimator interface:
``fit`` calibrates the source anchor, ``adapt_predict`` runs one optimizer
step per incoming image and ``predict`` scores without touching the state.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .exceptions import DegenerateDenominator, DegenerateDirection, EmptySource, NonFiniteGradient, NotFittedError
from .losses import (
    EmbeddingContext,
    LossReport,
    LossWeights,
    content_loss,
    entropy_loss,
    l2_reg,
    style_loss_direct,
    style_loss_directional,
    total_loss,
)
from .models import ToyModel, block_features, entropy_input_gradient, forward, forward_with_bein
from .normalization import BeINLayer, bein_backward
from .tensor import channel_mean, channel_std, cosine_similarity, ema_update

log = logging.getLogger(__name__)


@dataclass
class SourceCalibration:
    anchor_mu: np.ndarray
    anchor_sigma: np.ndarray
    source_embedding_mean: np.ndarray
    sample_count: int
    insertion_index: int = 3

    def __post_init__(self):
        if self.sample_count < 1:
            raise EmptySource("calibration needs at least one sample")
        if not np.all(np.asarray(self.anchor_sigma) > 0):
            raise ValueError("anchor sigma must be strictly positive")

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SourceCalibration":
        return cls(np.asarray(d["anchor_mu"]), np.asarray(d["anchor_sigma"]),
                   np.asarray(d["source_embedding_mean"]), int(d["sample_count"]), int(d["insertion_index"]))


@dataclass
class AdapterConfig:
    rho: float = 0.7
    lr: float = 1e-3
    momentum: float = 0.9
    lambda1: float = 0.3
    lambda2: float = 1.0
    lambda3: float = 0.3
    lambda4: float = 0.04
    ema_momentum: float = 0.99
    insertion_index: int = 3
    style_loss: str = "directional"
    entropy_reduction: str = "mean"
    l2_variant: str = "norm"
    per_channel: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.ema_momentum < 1:
            raise ValueError("ema_momentum must lie in [0, 1)")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if self.style_loss not in ("directional", "direct"):
            raise ValueError(f"unknown style loss {self.style_loss!r}")
        if self.entropy_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown entropy reduction {self.entropy_reduction!r}")
        if self.l2_variant not in ("norm", "squared"):
            raise ValueError(f"unknown l2 variant {self.l2_variant!r}")
        LossWeights(*self.weights.as_tuple())

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def classification(cls, **overrides) -> "AdapterConfig":
        """Preset with the direct style loss and no content/L2 terms."""
        base = dict(rho=0.9, lr=0.1, lambda1=1.0, lambda2=0.0, lambda3=1.0, lambda4=0.0, style_loss="direct")
        return cls(**{**base, **overrides})


@dataclass
class AdaptationState:
    bein: BeINLayer
    buf_sigma: float | np.ndarray = 0.0
    buf_mu: float | np.ndarray = 0.0
    ema: np.ndarray | None = None
    step_count: int = 0
    diagnostics: deque = field(default_factory=lambda: deque(maxlen=1024))

    @classmethod
    def initial(cls, calib: SourceCalibration, cfg: AdapterConfig) -> "AdaptationState":
        bein = BeINLayer(calib.anchor_mu, calib.anchor_sigma, cfg.rho, 0.0, 0.0, cfg.per_channel)
        zero = np.zeros(bein.channels) if cfg.per_channel else 0.0
        return cls(bein, zero, zero if np.isscalar(zero) else zero.copy())

    @property
    def gammas(self) -> tuple:
        return self.bein.gamma_sigma, self.bein.gamma_mu

    def fingerprint(self) -> bytes:
        parts = [np.atleast_1d(np.asarray(v, dtype="<f8")).tobytes()
                 for v in (*self.gammas, self.buf_sigma, self.buf_mu)]
        parts.append(b"-" if self.ema is None else np.asarray(self.ema, dtype="<f8").tobytes())
        parts.append(str(self.step_count).encode())
        return b"|".join(parts)


def _iter_arrays(samples):
    for s in samples:
        yield np.asarray(getattr(s, "x", s), dtype=np.float64)


def calibrate_source(model: ToyModel, source_samples, insertion_index: int | None = None,
                     chunk: int = 64) -> SourceCalibration:
    """Running averages of per-sample channel stats and pooled embeddings at block k."""
    k = model.check_insertion(model.insertion_index if insertion_index is None else insertion_index)
    mu = sigma = emb = None
    n = 0
    batch: list = []

    def consume(b):
        nonlocal mu, sigma, emb, n
        feats = block_features(model, np.stack(b), k)
        for f in feats:
            n += 1
            m, s = channel_mean(f), channel_std(f)
            if mu is None:
                mu, sigma, emb = m, s, m.copy()
                continue
            mu = mu + (m - mu) / n
            sigma = sigma + (s - sigma) / n
            emb = emb + (m - emb) / n

    for x in _iter_arrays(source_samples):
        batch.append(x)
        if len(batch) == chunk:
            consume(batch)
            batch = []
    if batch:
        consume(batch)
    if n == 0:
        raise EmptySource("no source samples supplied")
    return SourceCalibration(mu, sigma, emb, n, k)


def sgd_momentum_step(param, grad, buf, lr: float, m: float):
    """``buf' = m * buf + grad``; ``param' = param - lr * buf'``."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains non-finite values")
    new_buf = m * buf + grad
    return param - lr * new_buf, new_buf


def _argmax(logits):
    """Class index for ``(K,)`` logits, per-position indices for ``(P, K)``."""
    pred = np.asarray(logits).argmax(axis=-1)
    return int(pred) if pred.ndim == 0 else pred


def _safe_cos(a, b) -> float:
    try:
        return cosine_similarity(a, b)[0]
    except DegenerateDirection:
        return float("nan")


@dataclass
class StepResult:
    prediction: int | np.ndarray
    report: LossReport
    diagnostics: dict
    skipped: str | None = None
    mu_t_hat: np.ndarray | None = None
    sigma_t_hat: np.ndarray | None = None
    sample_mu: np.ndarray | None = None
    sample_sigma: np.ndarray | None = None


@dataclass
class LossEvaluation:
    report: LossReport
    d_gamma_sigma: float | np.ndarray
    d_gamma_mu: float | np.ndarray
    forward: object
    diagnostics: dict


def evaluate_loss(model: ToyModel, bein: BeINLayer, calib: SourceCalibration, cfg: AdapterConfig, x,
                  ema=None) -> LossEvaluation:
    """Total loss at the current gammas and its gradient w.r.t. both of them.

    ``ema=None`` means A is not initialized yet: A is taken to be E(x) and the
    directional style term is skipped. Raises DegenerateDenominator.
    """
    w = cfg.weights
    fwd = forward_with_bein(model, bein, x, cfg.insertion_index)
    e, e_ad, e_src = fwd.e, fwd.e_adapted, calib.source_embedding_mean
    first = ema is None
    ema = e if first else ema
    ctx = EmbeddingContext(e, e_ad, e_src, ema)

    if cfg.style_loss == "directional":
        style = style_loss_directional(ctx)
        if first:
            style = style._replace(value=0.0, grad=np.zeros_like(e), skipped=True)
    else:
        style = style_loss_direct(ctx)
    content = content_loss(ctx)
    skipped = [name for name, term in (("style", style), ("content", content)) if term.skipped]
    ent = entropy_loss(fwd.logits, cfg.entropy_reduction)
    l2_val, (l2_gs, l2_gm) = l2_reg(bein.gamma_sigma, bein.gamma_mu, variant=cfg.l2_variant)
    report = total_loss({"style": style.value, "content": content.value, "entropy": ent.value, "l2": l2_val},
                        w, skipped)

    # style and content read the pooled BeIN output; entropy flows back through the tail
    d_emb = w.lambda1 * style.grad + w.lambda2 * content.grad
    hw = fwd.adapted.shape[1] * fwd.adapted.shape[2]
    g_map = np.broadcast_to((d_emb / hw)[:, None, None], fwd.adapted.shape)
    if w.lambda3 > 0:
        g_map = g_map + entropy_input_gradient(fwd, model, w.lambda3 * ent.grad)
    d_gs, d_gm = bein_backward(fwd.bein_cache, g_map)
    diag = {
        "dir_sim": _safe_cos(e_src - ema, e_ad - e),
        "tgt_sim": _safe_cos(e, e_ad),
        "src_sim": _safe_cos(e_src, e_ad),
        "entropy": ent.value,
    }
    return LossEvaluation(report, d_gs + w.lambda4 * l2_gs, d_gm + w.lambda4 * l2_gm, fwd, diag)


def adapt_step(model: ToyModel, state: AdaptationState, calib: SourceCalibration, cfg: AdapterConfig, x) -> StepResult:
    """One online step: predict with the current gammas, then update them once."""
    x = np.asarray(getattr(x, "x", x), dtype=np.float64)
    try:
        ev = evaluate_loss(model, state.bein, calib, cfg, x, state.ema)
    except DegenerateDenominator as exc:
        log.warning("step %d skipped: %s", state.step_count, exc)
        logits = forward(model, x)[0]
        state.step_count += 1
        diag = {"dir_sim": float("nan"), "tgt_sim": float("nan"), "src_sim": float("nan"), "entropy": float("nan")}
        return StepResult(_argmax(logits), LossReport(skipped_terms=["all"]), diag, "degenerate_denominator")

    fwd = ev.forward
    result = StepResult(_argmax(fwd.logits), ev.report, ev.diagnostics, None,
                        fwd.bein_cache.mu_t_hat, fwd.bein_cache.sigma_t_hat,
                        fwd.bein_cache.mu_x, fwd.bein_cache.sigma_x)
    try:
        gs, bs = sgd_momentum_step(state.bein.gamma_sigma, ev.d_gamma_sigma, state.buf_sigma, cfg.lr, cfg.momentum)
        gm, bm = sgd_momentum_step(state.bein.gamma_mu, ev.d_gamma_mu, state.buf_mu, cfg.lr, cfg.momentum)
        new_bein = state.bein.with_gammas(gs, gm)
    except (NonFiniteGradient, ValueError) as exc:
        log.warning("step %d skipped: %s", state.step_count, exc)
        result.skipped = "non_finite_gradient"
    else:
        state.bein, state.buf_sigma, state.buf_mu = new_bein, bs, bm
    state.ema = ema_update(state.ema, fwd.e, cfg.ema_momentum)
    state.step_count += 1
    state.diagnostics.append(ev.diagnostics)
    return result


class BESTTA(ClassifierMixin, BaseEstimator):
    """Single-image continual test-time adaptation through one BeIN layer.

    Parameters mirror :class:`AdapterConfig`; ``model`` is the frozen
    :class:`~bestta.models.ToyModel` to adapt. ``fit`` takes source images.
    """

    def __init__(self, model=None, rho=0.7, lr=1e-3, momentum=0.9, lambda1=0.3, lambda2=1.0, lambda3=0.3,
                 lambda4=0.04, ema_momentum=0.99, insertion_index=3, style_loss="directional",
                 entropy_reduction="mean", l2_variant="norm", per_channel=False):
        self.model = model
        self.rho = rho
        self.lr = lr
        self.momentum = momentum
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.lambda4 = lambda4
        self.ema_momentum = ema_momentum
        self.insertion_index = insertion_index
        self.style_loss = style_loss
        self.entropy_reduction = entropy_reduction
        self.l2_variant = l2_variant
        self.per_channel = per_channel

    @property
    def config(self) -> AdapterConfig:
        params = self.get_params(deep=False)
        params.pop("model")
        return AdapterConfig(**params)

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit() with source samples first")

    def fit(self, X, y=None, calibration: SourceCalibration | None = None):
        if self.model is None:
            raise ValueError("BESTTA needs a frozen model")
        cfg = self.config
        self.calibration_ = calibration or calibrate_source(self.model, X, cfg.insertion_index)
        self.state_ = AdaptationState.initial(self.calibration_, cfg)
        self.classes_ = np.arange(self.model.n_classes)
        self.last_step_ = None
        return self

    @classmethod
    def from_calibration(cls, model, calibration, cfg: AdapterConfig | None = None) -> "BESTTA":
        est = cls(model, **(cfg or AdapterConfig()).to_dict())
        return est.fit(None, calibration=calibration)

    def adapt_step(self, x) -> StepResult:
        self._check_fitted()
        self.last_step_ = adapt_step(self.model, self.state_, self.calibration_, self.config, x)
        return self.last_step_

    def adapt_predict(self, X) -> np.ndarray:
        """Predict each image with the current state, adapting after every one."""
        return np.array([self.adapt_step(x).prediction for x in _iter_arrays(X)])

    def partial_fit(self, X, y=None):
        self.adapt_predict(X)
        return self

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        k = self.config.insertion_index
        return np.stack([forward_with_bein(self.model, self.state_.bein, x, k).logits for x in _iter_arrays(X)])

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=-1)

    def state_fingerprint(self) -> bytes:
        self._check_fitted()
        return self.state_.fingerprint()


def run_stream(model: ToyModel, calib: SourceCalibration, cfg: AdapterConfig, stream, eval_set=None, method="bestta"):
    """Adapt sequentially over ``stream`` and return a RunReport."""
    from .runner import execute_stream

    return execute_stream(BESTTA.from_calibration(model, calib, cfg), stream, eval_set=eval_set, method=method,
                          config=cfg.to_dict())
