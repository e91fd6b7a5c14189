"""Reference adapters sharing the ``fit / adapt_predict / predict`` interface."""
from __future__ import annotations

import enum

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .adapter import BESTTA, AdapterConfig, StepResult, _argmax, _iter_arrays, sgd_momentum_step
from .exceptions import NonFiniteGradient, NotFittedError
from .losses import LossReport, entropy_loss
from .models import backward, forward, predict_logits


class BaselineKind(str, enum.Enum):
    SOURCE = "source"
    BN_STATS_ADAPT = "bn_stats_adapt"
    TENT_CONTINUAL = "tent_continual"
    BESTTA = "bestta"


class _FrozenAdapter(ClassifierMixin, BaseEstimator):
    bn_mode = "frozen"

    def __init__(self, model=None):
        self.model = model

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError(f"{type(self).__name__} needs a frozen model")
        self.classes_ = np.arange(self.model.n_classes)
        self.entropies_ = []
        return self

    def _check_fitted(self):
        if not hasattr(self, "classes_"):
            raise NotFittedError("call fit() first")

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        return predict_logits(self.model, np.stack(list(_iter_arrays(X))), self.bn_mode)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=-1)

    def adapt_step(self, x) -> StepResult:
        self._check_fitted()
        logits = forward(self.model, np.asarray(getattr(x, "x", x), dtype=np.float64), self.bn_mode)[0]
        h = entropy_loss(logits).value
        return StepResult(_argmax(logits), LossReport(entropy=h), {"entropy": h})

    def adapt_predict(self, X) -> np.ndarray:
        return self.predict(X)

    def state_fingerprint(self) -> bytes:
        return b"stateless"


class SourceOnly(_FrozenAdapter):
    """The frozen source model, no adaptation."""


class BNStatsAdapt(_FrozenAdapter):
    """Every BN normalizes with the statistics of the single incoming image."""

    bn_mode = "instance"


class TentContinual(ClassifierMixin, BaseEstimator):
    """Sample-statistics BN whose affines are trained by entropy, never reset."""

    def __init__(self, model=None, lr=1e-3, momentum=0.9):
        self.model = model
        self.lr = lr
        self.momentum = momentum

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("TentContinual needs a frozen model")
        self.affines_ = [(bn.alpha.copy(), bn.beta.copy()) for bn in self.model.bns]
        self.buffers_ = [(np.zeros_like(a), np.zeros_like(b)) for a, b in self.affines_]
        self.classes_ = np.arange(self.model.n_classes)
        self.step_count_ = 0
        return self

    def _check_fitted(self):
        if not hasattr(self, "affines_"):
            raise NotFittedError("call fit() first")

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        return predict_logits(self.model, np.stack(list(_iter_arrays(X))), "instance", self.affines_)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=-1)

    def adapt_step(self, x) -> StepResult:
        self._check_fitted()
        x = np.asarray(getattr(x, "x", x), dtype=np.float64)
        logits, cache = forward(self.model, x, "instance", self.affines_)
        ent = entropy_loss(logits)
        grads = backward(self.model, cache, ent.grad, input_grad=False)
        new_aff, new_buf = [], []
        skipped = None
        try:
            for (a, b), (ba, bb), ga, gb in zip(self.affines_, self.buffers_, grads["alpha"], grads["beta"]):
                a2, ba2 = sgd_momentum_step(a, ga, ba, self.lr, self.momentum)
                b2, bb2 = sgd_momentum_step(b, gb, bb, self.lr, self.momentum)
                new_aff.append((a2, b2))
                new_buf.append((ba2, bb2))
        except NonFiniteGradient:
            skipped = "non_finite_gradient"
        else:
            self.affines_, self.buffers_ = new_aff, new_buf
        self.step_count_ += 1
        report = LossReport(entropy=ent.value, total=ent.value)
        return StepResult(_argmax(logits), report, {"entropy": ent.value}, skipped)

    def adapt_predict(self, X) -> np.ndarray:
        return np.array([self.adapt_step(x).prediction for x in _iter_arrays(X)])

    def state_fingerprint(self) -> bytes:
        self._check_fitted()
        return b"|".join(np.asarray(v, dtype="<f8").tobytes() for pair in self.affines_ for v in pair)


def make_adapter(kind, model, calibration=None, cfg: AdapterConfig | None = None, tent_lr: float = 1e-3,
                 tent_momentum: float = 0.9):
    """Build a fitted adapter of the requested kind."""
    kind = BaselineKind(kind)
    if kind is BaselineKind.SOURCE:
        return SourceOnly(model).fit()
    if kind is BaselineKind.BN_STATS_ADAPT:
        return BNStatsAdapt(model).fit()
    if kind is BaselineKind.TENT_CONTINUAL:
        return TentContinual(model, tent_lr, tent_momentum).fit()
    if calibration is None:
        raise ValueError("bestta needs a source calibration")
    return BESTTA.from_calibration(model, calibration, cfg)
