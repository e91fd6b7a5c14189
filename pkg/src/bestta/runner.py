"""Sequential stream execution and the per-run report."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import EmptyDataset

log = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = (
    "step", "domain", "severity", "style", "content", "entropy", "l2", "total",
    "dir_sim", "tgt_sim", "src_sim", "gamma_sigma", "gamma_mu", "correct",
)


@dataclass
class SegmentResult:
    index: int
    round: int
    domain: str
    severity: int
    count: int
    accuracy: float


@dataclass
class RunReport:
    """Everything one adaptation run produced.

    ``source_accuracy[r]`` is the accuracy on the held-out source set after
    round ``r + 1``; it is empty when no evaluation set was supplied.
    """

    method: str
    segments: list = field(default_factory=list)
    source_accuracy: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    wall_time: float = 0.0
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or self.method

    def round_means(self) -> dict:
        by_round: dict = {}
        for s in self.segments:
            by_round.setdefault(s.round, []).append(s.accuracy)
        return {r: float(np.mean(v)) for r, v in sorted(by_round.items())}

    @property
    def mean_accuracy(self) -> float:
        if not self.segments:
            return float("nan")
        return float(np.mean([s.accuracy for s in self.segments]))

    def to_dict(self, with_diagnostics: bool = False) -> dict:
        doc = {
            "name": self.label,
            "method": self.method,
            "segments": [asdict(s) for s in self.segments],
            "round_means": {str(r): v for r, v in self.round_means().items()},
            "mean_accuracy": self.mean_accuracy,
            "source_accuracy": list(self.source_accuracy),
            "config": self.config,
            "seeds": self.seeds,
            "wall_time": self.wall_time,
        }
        if with_diagnostics:
            doc["diagnostics"] = self.diagnostics
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        return cls(doc["method"], [SegmentResult(**s) for s in doc["segments"]], list(doc["source_accuracy"]),
                   list(doc.get("diagnostics", [])), dict(doc.get("config", {})), dict(doc.get("seeds", {})),
                   float(doc.get("wall_time", 0.0)), doc.get("name", ""))


def _target(sample, dense: bool):
    return sample.target(dense) if hasattr(sample, "target") else sample.label


def _score(prediction, target) -> float:
    return float(np.mean(np.asarray(prediction) == np.asarray(target)))


def evaluate(adapter, X, y) -> float:
    """Accuracy of ``adapter.predict`` on ``(X, y)``; adaptation state is left untouched."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise EmptyDataset("evaluation set is empty")
    before = adapter.state_fingerprint()
    acc = _score(adapter.predict(X), y)
    if adapter.state_fingerprint() != before:
        raise RuntimeError("evaluation mutated the adaptation state")
    return acc


def _gammas(adapter):
    state = getattr(adapter, "state_", None)
    if state is None:
        return None, None
    gs, gm = state.gammas
    return float(np.mean(gs)), float(np.mean(gm))


def execute_stream(adapter, stream, eval_set=None, method: str = "bestta", config: dict | None = None,
                   seeds: dict | None = None, name: str = "") -> RunReport:
    """Run ``adapter.adapt_step`` over every image of ``stream`` in order.

    ``eval_set`` is an optional ``(X, y)`` pair scored after each round.
    """
    if len(stream) == 0:
        raise ValueError("stream is empty")
    dense = getattr(adapter.model, "head_kind", "pool") == "dense"
    report = RunReport(method, config=dict(config or {}), seeds=dict(seeds or {}), name=name)
    t0 = time.perf_counter()
    step = 0
    segments = list(stream.segments)
    for i, seg in enumerate(segments):
        scores = []
        for sample in stream.samples(i):
            gs, gm = _gammas(adapter)
            res = adapter.adapt_step(sample.x)
            score = _score(res.prediction, _target(sample, dense))
            scores.append(score)
            rep, diag = res.report, res.diagnostics
            report.diagnostics.append({
                "step": step, "domain": seg.domain.name, "severity": seg.severity,
                "style": rep.style, "content": rep.content, "entropy": rep.entropy, "l2": rep.l2, "total": rep.total,
                "dir_sim": diag.get("dir_sim"), "tgt_sim": diag.get("tgt_sim"), "src_sim": diag.get("src_sim"),
                "gamma_sigma": gs, "gamma_mu": gm, "correct": score,
            })
            if res.skipped:
                log.info("step %d: optimizer step skipped (%s)", step, res.skipped)
            step += 1
        report.segments.append(SegmentResult(i, seg.round, seg.domain.name, seg.severity, seg.count,
                                             float(np.mean(scores)) if scores else float("nan")))
        round_done = i + 1 == len(segments) or segments[i + 1].round != seg.round
        if eval_set is not None and round_done:
            report.source_accuracy.append(evaluate(adapter, *eval_set))
    report.wall_time = time.perf_counter() - t0
    return report
