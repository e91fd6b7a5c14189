"""Benchmark orchestration: baselines, ablation grids, correlations, report files."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .adapter import BESTTA, AdapterConfig, SourceCalibration, calibrate_source
from .baselines import BaselineKind, make_adapter
from .exceptions import DegenerateInput, IoFailure
from .models import block_features, forward_with_bein
from .runner import DIAGNOSTIC_COLUMNS, RunReport, execute_stream
from .simulator import (
    StreamSchedule,
    continual_schedule,
    default_domains,
    domain_samples,
    make_source_dataset,
    stack_samples,
)
from .tensor import channel_mean, channel_std

log = logging.getLogger(__name__)

DEFAULT_SEED = 0
CORRELATION_METRICS = ("dir_sim", "tgt_sim", "src_sim", "entropy")

# Cumulative rows: entropy alone, then style, content and finally L2 switched on.
LOSS_ROWS = (
    ("entropy", ("entropy",)),
    ("entropy+style", ("entropy", "style")),
    ("entropy+style+content", ("entropy", "style", "content")),
    ("full", ("entropy", "style", "content", "l2")),
)
_TERM_FIELD = {"style": "lambda1", "content": "lambda2", "entropy": "lambda3", "l2": "lambda4"}


def sub_seed(seed: int, tag: str) -> int:
    """Independent 63-bit seed for one consumer of a run seed."""
    state = np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


@dataclass(frozen=True)
class Protocol:
    """Default continual benchmark: 4 domains x 10 rounds at severity 5."""

    seed: int = DEFAULT_SEED
    rounds: int = 10
    samples_per_domain: int = 100
    severity: int = 5
    n_calibration: int = 300
    n_eval: int = 200

    def schedule(self) -> StreamSchedule:
        return continual_schedule(default_domains(), self.rounds, self.samples_per_domain, self.severity,
                                  seed=sub_seed(self.seed, "stream"))

    def calibration_samples(self) -> list:
        return make_source_dataset(sub_seed(self.seed, "calibration"), self.n_calibration)

    def eval_set(self, dense: bool = True):
        return stack_samples(make_source_dataset(sub_seed(self.seed, "eval"), self.n_eval), dense)

    def seeds(self) -> dict:
        return {"run": self.seed, **{t: sub_seed(self.seed, t) for t in ("stream", "calibration", "eval")}}


def stream_digest(stream: StreamSchedule) -> str:
    return hashlib.sha256(stream.to_json(with_truth=False).encode()).hexdigest()[:16]


def run_baseline(kind, model, stream: StreamSchedule, cfg: AdapterConfig | None = None,
                 calibration: SourceCalibration | None = None, eval_set=None, seeds: dict | None = None,
                 name: str = "") -> RunReport:
    kind = BaselineKind(kind)
    cfg = cfg or AdapterConfig()
    adapter = make_adapter(kind, model, calibration, cfg)
    echo = cfg.to_dict() if kind is BaselineKind.BESTTA else {}
    seeds = {**(seeds or {}), "stream_digest": stream_digest(stream)}
    return execute_stream(adapter, stream, eval_set, kind.value, echo, seeds, name)


def compare(model, stream: StreamSchedule, calibration: SourceCalibration, cfg: AdapterConfig | None = None,
            eval_set=None, kinds=tuple(BaselineKind), seeds: dict | None = None) -> list[RunReport]:
    """Every requested method on the very same stream."""
    reports = [run_baseline(k, model, stream, cfg, calibration, eval_set, seeds) for k in kinds]
    if len({r.seeds["stream_digest"] for r in reports}) != 1:
        raise RuntimeError("methods consumed different streams")
    return reports


def pearson_correlation(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateInput("need two 1-D sequences of equal length")
    if len(x) < 3:
        raise DegenerateInput("need at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise DegenerateInput("constant sequence has no correlation")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def diagnostic_correlations(report: RunReport, metrics=CORRELATION_METRICS) -> list[dict]:
    """Pearson r between each per-step metric and per-step accuracy."""
    rows = []
    for m in metrics:
        pairs = [(d[m], d["correct"]) for d in report.diagnostics
                 if d.get(m) is not None and np.isfinite(d[m])]
        try:
            r = pearson_correlation(*zip(*pairs)) if pairs else None
        except DegenerateInput:
            r = None
        rows.append({"metric": m, "r": r, "n": len(pairs)})
    return rows


def feature_truth(model, samples, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Domain-level (mu_t, sigma_t) at block ``index``: per-image channel stats averaged over ``samples``."""
    feats = block_features(model, np.stack([np.asarray(getattr(s, "x", s)) for s in samples]), index)
    return channel_mean(feats).mean(axis=0), channel_std(feats).mean(axis=0)


def estimation_error(model, calibration: SourceCalibration, domain, severity: int, cfg: AdapterConfig | None = None,
                     steps: int = 200, n_eval: int = 100, n_truth: int = 400, seed: int = DEFAULT_SEED) -> dict:
    """MAE of BeIN's (mu_t_hat, sigma_t_hat) and of raw single-image stats against the domain truth.

    The adapter first runs ``steps`` online steps on the domain; the errors are
    then averaged over ``n_eval`` fresh images scored without further updates.
    """
    cfg = cfg or AdapterConfig()
    k = cfg.insertion_index
    mu_t, sigma_t = feature_truth(model, domain_samples(sub_seed(seed, "truth"), domain, severity, n_truth), k)
    est = BESTTA.from_calibration(model, calibration, cfg)
    for s in domain_samples(sub_seed(seed, "adapt"), domain, severity, steps):
        est.adapt_step(s.x)
    bein_err, raw_err = [], []
    for s in domain_samples(sub_seed(seed, "probe"), domain, severity, n_eval):
        c = forward_with_bein(model, est.state_.bein, s.x, k).bein_cache
        bein_err.append(np.mean(np.abs(np.r_[c.mu_t_hat - mu_t, c.sigma_t_hat - sigma_t])))
        raw_err.append(np.mean(np.abs(np.r_[c.mu_x - mu_t, c.sigma_x - sigma_t])))
    return {"domain": domain.name, "severity": severity, "bein_mae": float(np.mean(bein_err)),
            "raw_mae": float(np.mean(raw_err)), "gamma_sigma": float(np.mean(est.state_.gammas[0])),
            "gamma_mu": float(np.mean(est.state_.gammas[1]))}


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def loss_grid(base: AdapterConfig) -> list[tuple[str, dict]]:
    cells = []
    for name, active in LOSS_ROWS:
        cells.append((name, {f: (getattr(base, f) if t in active else 0.0) for t, f in _TERM_FIELD.items()}))
    return cells


def parse_grid(spec: str, base: AdapterConfig | None = None) -> list[tuple[str, dict]]:
    """``loss``, ``insertion`` or a lattice like ``rho=0.5,0.7;ema_momentum=0.9,0.99``."""
    base = base or AdapterConfig()
    spec = spec.strip()
    if spec == "loss":
        return loss_grid(base)
    if spec == "insertion":
        return [(f"insertion_index={k}", {"insertion_index": k}) for k in (1, 2, 3, 4)]
    axes = []
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        key, sep, values = part.partition("=")
        if not sep or not values:
            raise ValueError(f"bad grid axis {part!r}")
        key = key.strip()
        if key not in AdapterConfig.__dataclass_fields__:
            raise ValueError(f"unknown config key {key!r}")
        axes.append([(key, _parse_value(v.strip())) for v in values.split(",")])
    if not axes:
        raise ValueError("empty grid")
    return [(",".join(f"{k}={v}" for k, v in combo), dict(combo)) for combo in itertools.product(*axes)]


class MetricsSink:
    """Collects finished reports from concurrent grid cells."""

    def __init__(self):
        self._lock = threading.Lock()
        self._items: list = []

    def append(self, item) -> None:
        with self._lock:
            self._items.append(item)

    def snapshot(self) -> list:
        with self._lock:
            return list(self._items)


@dataclass
class CellFailure:
    name: str
    error: str


def ablate(grid, base_cfg: AdapterConfig, model, stream: StreamSchedule, source_samples, eval_set=None,
           workers: int = 1, seeds: dict | None = None, sink: MetricsSink | None = None) -> list:
    """One BESTTA run per grid cell. Failed cells become :class:`CellFailure` entries."""
    cells = parse_grid(grid, base_cfg) if isinstance(grid, str) else list(grid)
    if not cells:
        raise ValueError("empty grid")
    calibrations: dict = {}
    lock = threading.Lock()
    sink = sink or MetricsSink()

    def calibration_for(k):
        with lock:
            if k not in calibrations:
                calibrations[k] = calibrate_source(model, source_samples, k)
            return calibrations[k]

    def work(item):
        name, overrides = item
        try:
            cfg = replace(base_cfg, **overrides)
            rep = run_baseline(BaselineKind.BESTTA, model, stream, cfg, calibration_for(cfg.insertion_index),
                               eval_set, seeds, name)
        except Exception as exc:  # one bad cell must not sink its siblings
            log.error("grid cell %s failed: %s", name, exc)
            rep = CellFailure(name, f"{type(exc).__name__}: {exc}")
        sink.append(rep)
        return rep

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, cells))
    return [work(c) for c in cells]


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row.get(h)) for h in header])
    return buf.getvalue()


SUMMARY_COLUMNS = ("name", "method", "row", "round", "segment", "domain", "severity", "count", "accuracy")


def summary_rows(reports) -> list[dict]:
    rows = []
    for rep in sorted(reports, key=lambda r: (r.method, r.label)):
        means = rep.round_means()
        for rnd in means:
            for s in (s for s in rep.segments if s.round == rnd):
                rows.append({"name": rep.label, "method": rep.method, "row": "segment", "round": rnd,
                             "segment": s.index, "domain": s.domain, "severity": s.severity, "count": s.count,
                             "accuracy": s.accuracy})
            rows.append({"name": rep.label, "method": rep.method, "row": "round_mean", "round": rnd,
                         "accuracy": means[rnd]})
        rows.append({"name": rep.label, "method": rep.method, "row": "mean_all_rounds", "accuracy": rep.mean_accuracy})
    return rows


def forgetting_rows(reports) -> list[dict]:
    rows = []
    for rep in sorted(reports, key=lambda r: (r.method, r.label)):
        means = rep.round_means()
        for i, rnd in enumerate(means):
            src = rep.source_accuracy[i] if i < len(rep.source_accuracy) else None
            rows.append({"name": rep.label, "method": rep.method, "round": rnd, "target_accuracy": means[rnd],
                         "source_accuracy": src})
    return rows


def correlation_rows(reports) -> list[dict]:
    rows = []
    for rep in sorted(reports, key=lambda r: (r.method, r.label)):
        for row in diagnostic_correlations(rep):
            rows.append({"name": rep.label, "method": rep.method, **row})
    return rows


def render_report(reports) -> dict[str, str]:
    """File name -> text for every output file; identical reports give identical text."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to emit")
    files = {
        "summary.csv": _csv_text(SUMMARY_COLUMNS, summary_rows(reports)),
        "forgetting.csv": _csv_text(("name", "method", "round", "target_accuracy", "source_accuracy"),
                                    forgetting_rows(reports)),
        "correlations.csv": _csv_text(("name", "method", "metric", "r", "n"), correlation_rows(reports)),
        "report.json": json.dumps({"reports": [r.to_dict() for r in reports]}, sort_keys=True, indent=1) + "\n",
    }
    if len(reports) == 1:
        files["diagnostics.csv"] = _csv_text(DIAGNOSTIC_COLUMNS, reports[0].diagnostics)
    else:
        for rep in reports:
            files[f"runs/{run_dirname(rep.label)}/diagnostics.csv"] = _csv_text(DIAGNOSTIC_COLUMNS, rep.diagnostics)
    return files


def run_dirname(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in text)


def emit_report(reports, out_dir) -> list[Path]:
    """Write the report files into ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    written = []
    try:
        for rel, text in render_report(reports).items():
            path = out / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
            written.append(path)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc
    return written


def read_diagnostics(path) -> list[dict]:
    """Parse a diagnostics CSV back into rows of floats (blank cells become None)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    out = []
    for row in rows:
        d = {}
        for k, v in row.items():
            if k == "domain":
                d[k] = v
            elif k in ("step", "severity"):
                d[k] = int(v)
            else:
                d[k] = float(v) if v != "" else None
        out.append(d)
    return out
