"""Procedural source data, parametric corruptions and stream schedules.

Source images are oriented stripe/checker textures on a random per-image
colour, clipped to ``[0, 1]``. With the ``"regions"`` layout each image is cut
by a straight line into a dominant region (the image label) and a smaller
region of another class; the per-pixel mask is the dense target. Target domains corrupt them with

    x' = contrast_scale * x ** gamma_warp + additive_bias + N(0, noise_std^2)

where every parameter is looked up per channel at severity 1..5.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InvalidSeverity

SEVERITIES = (1, 2, 3, 4, 5)
GRADUAL_LEVELS = (1, 2, 3, 4, 5, 4, 3, 2, 1)


def _key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


@dataclass(frozen=True)
class SourceSpec:
    channels: int = 3
    size: int = 16
    n_classes: int = 4
    amplitude: tuple = (0.15, 0.3)
    base: tuple = (0.3, 0.7)
    texture_std: float = 0.08
    layout: str = "regions"

    def __post_init__(self):
        if self.layout not in ("regions", "single"):
            raise ValueError(f"unknown layout {self.layout!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["amplitude"], d["base"] = list(self.amplitude), list(self.base)
        return d


@dataclass
class LabeledSample:
    x: np.ndarray
    label: int
    domain: str = "source"
    mask: np.ndarray | None = None

    def target(self, dense: bool):
        if dense:
            if self.mask is None:
                return np.full(self.x.shape[1] * self.x.shape[2], self.label)
            return self.mask.ravel()
        return self.label


def _pattern(cls: int, size: int, phase: int, period: int) -> np.ndarray:
    i, j = np.mgrid[0:size, 0:size]
    kind = cls % 4
    if kind == 0:
        t = i
    elif kind == 1:
        t = j
    elif kind == 2:
        return np.where(((i + phase) // (period // 2) + (j + phase) // (period // 2)) % 2 == 0, 1.0, -1.0)
    else:
        t = i + j
    return np.where(((t + phase) % period) < period // 2, 1.0, -1.0)


def _texture(rng, label, spec):
    c, s = spec.channels, spec.size
    pat = _pattern(label, s, int(rng.integers(0, 4)), 4)
    amp = rng.uniform(*spec.amplitude) * rng.uniform(0.6, 1.0, size=c)
    return amp[:, None, None] * pat[None]


def _layout_mask(rng, label, spec) -> np.ndarray:
    s = spec.size
    mask = np.full((s, s), label)
    if spec.layout == "single":
        return mask
    other = (label + int(rng.integers(1, spec.n_classes))) % spec.n_classes
    cut = int(rng.integers(s // 4, s // 2))
    if rng.random() < 0.5:
        mask[:cut] = other
    else:
        mask[:, :cut] = other
    if rng.random() < 0.5:
        mask = mask[::-1, ::-1]
    return np.ascontiguousarray(mask)


def _draw(rng: np.random.Generator, label: int, spec: SourceSpec) -> tuple[np.ndarray, np.ndarray]:
    c, s = spec.channels, spec.size
    mask = _layout_mask(rng, label, spec)
    base = rng.uniform(*spec.base, size=c)
    x = np.broadcast_to(base[:, None, None], (c, s, s)).copy()
    for k in np.unique(mask):
        x += np.where(mask[None] == k, _texture(rng, int(k), spec), 0.0)
    x += rng.normal(0.0, spec.texture_std, size=(c, s, s))
    return np.clip(x, 0.0, 1.0), mask


def balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % n_classes
    return rng.permutation(labels)


def make_source_dataset(seed: int, n: int, spec: SourceSpec | None = None) -> list[LabeledSample]:
    """Class-balanced clean samples; identical for identical ``(seed, n, spec)``."""
    spec = SourceSpec() if spec is None else spec
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng([seed, 0])
    labels = balanced_labels(n, spec.n_classes, rng)
    out = []
    for k in labels:
        x, mask = _draw(rng, int(k), spec)
        out.append(LabeledSample(x, int(k), "source", mask))
    return out


def stack_samples(samples, dense: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and targets: image labels, or flattened masks with ``dense``."""
    return np.stack([s.x for s in samples]), np.stack([np.asarray(s.target(dense)) for s in samples])


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

def _levels(value, channels: int) -> list:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = np.full(5, float(a))
    if a.ndim == 1:
        a = np.repeat(a[:, None], channels, axis=1)
    if a.shape != (5, channels):
        raise ValueError(f"per-severity parameter must broadcast to (5, {channels}), got {a.shape}")
    return a.tolist()


@dataclass(frozen=True)
class DomainSpec:
    """Per-severity, per-channel corruption parameters (row s-1 holds severity s)."""

    name: str
    additive_bias: tuple
    contrast_scale: tuple
    noise_std: tuple
    gamma_warp: tuple

    @classmethod
    def build(cls, name, bias=0.0, scale=1.0, noise=0.0, warp=1.0, channels=3) -> "DomainSpec":
        d = cls(name, *(tuple(map(tuple, _levels(v, channels))) for v in (bias, scale, noise, warp)))
        if np.any(np.asarray(d.contrast_scale) <= 0) or np.any(np.asarray(d.gamma_warp) <= 0):
            raise ValueError("contrast_scale and gamma_warp must be positive")
        if np.any(np.asarray(d.noise_std) < 0):
            raise ValueError("noise_std must be non-negative")
        return d

    def params(self, severity: int) -> dict:
        if severity not in SEVERITIES:
            raise InvalidSeverity(f"severity must be one of 1..5, got {severity!r}")
        r = severity - 1
        return {k: np.asarray(getattr(self, k)[r]) for k in
                ("additive_bias", "contrast_scale", "noise_std", "gamma_warp")}

    def to_dict(self) -> dict:
        return {"name": self.name, **{k: [list(r) for r in getattr(self, k)] for k in
                                      ("additive_bias", "contrast_scale", "noise_std", "gamma_warp")}}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(d["name"], *(tuple(map(tuple, d[k])) for k in
                                ("additive_bias", "contrast_scale", "noise_std", "gamma_warp")))


def neutral_domain(name="neutral", channels=3) -> DomainSpec:
    return DomainSpec.build(name, channels=channels)


def pure_bias_domain(step: float = 0.1, name="bias", channels=3) -> DomainSpec:
    return DomainSpec.build(name, bias=[step * s for s in SEVERITIES], channels=channels)


def pure_scale_domain(step: float = 0.15, name="scale", channels=3) -> DomainSpec:
    return DomainSpec.build(name, scale=[1.0 - step * s for s in SEVERITIES], channels=channels)


def default_domains(channels: int = 3) -> list[DomainSpec]:
    """Four stand-in weather domains; each stresses a different statistic."""
    sev = np.array(SEVERITIES, dtype=np.float64)
    tint = np.linspace(-1.0, 1.0, channels)
    shrink = 1.0 - 0.15 * sev
    blurish = DomainSpec.build(
        "blurish", scale=shrink, bias=0.5 * (1.0 - shrink), channels=channels)
    dark = DomainSpec.build(
        "dark", scale=np.outer(1.0 - 0.09 * sev, 1.0 - 0.1 * tint), warp=1.0 + 0.2 * sev,
        bias=np.outer(-0.04 * sev, 1.0 + 0.3 * tint), channels=channels)
    noisy = DomainSpec.build(
        "noisy", noise=0.05 * sev, bias=np.outer(0.02 * sev, tint), channels=channels)
    washed = DomainSpec.build(
        "washed_out", scale=np.outer(1.0 - 0.12 * sev, 1.0 + 0.1 * tint), bias=0.08 * sev, channels=channels)
    return [blurish, dark, noisy, washed]


def apply_corruption(x: LabeledSample, d: DomainSpec, severity: int, seed: int) -> LabeledSample:
    p = d.params(severity)
    col = lambda v: v[:, None, None]  # noqa: E731
    rng = np.random.default_rng([seed, severity, _key(d.name)])
    base = np.maximum(x.x, 0.0) ** col(p["gamma_warp"])
    out = col(p["contrast_scale"]) * base + col(p["additive_bias"])
    if np.any(p["noise_std"] > 0):
        out = out + col(p["noise_std"]) * rng.standard_normal(x.x.shape)
    return LabeledSample(out, x.label, f"{d.name}@{severity}", x.mask)


def domain_samples(seed: int, d: DomainSpec, severity: int, n: int, spec: SourceSpec | None = None):
    """``n`` corrupted samples; the clean images depend on ``(seed, d.name)`` only,
    so every severity and every round corrupts the same underlying pictures."""
    spec = SourceSpec() if spec is None else spec
    clean = make_source_dataset(seed * 7919 + _key(d.name) % 100_003, n, spec)
    return [apply_corruption(s, d, severity, seed * 1_000_003 + i) for i, s in enumerate(clean)]


def input_statistics(samples) -> tuple[np.ndarray, np.ndarray]:
    """Average of per-image channel means and standard deviations."""
    X = np.stack([s.x for s in samples])
    return X.mean(axis=(0, 2, 3)), X.std(axis=(2, 3)).mean(axis=0)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    domain: DomainSpec
    severity: int
    count: int
    round: int = 1

    @property
    def label(self) -> str:
        return f"{self.domain.name}@{self.severity}"


@dataclass
class StreamSchedule:
    segments: list
    seed: int = 0
    kind: str = "custom"
    source_spec: SourceSpec = field(default_factory=SourceSpec)

    def __post_init__(self):
        if not self.segments:
            raise ValueError("a schedule needs at least one segment")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def total_samples(self) -> int:
        return sum(s.count for s in self.segments)

    @property
    def rounds(self) -> int:
        return max(s.round for s in self.segments)

    def samples(self, index: int) -> list[LabeledSample]:
        seg = self.segments[index]
        return domain_samples(self.seed, seg.domain, seg.severity, seg.count, self.source_spec)

    def __iter__(self):
        for i, seg in enumerate(self.segments):
            yield i, seg, self.samples(i)

    def ground_truth(self, n: int = 256) -> dict:
        """Input-level (mu_t, sigma_t) for every distinct (domain, severity)."""
        out = {}
        for seg in self.segments:
            if seg.label not in out:
                mu, sd = input_statistics(domain_samples(self.seed + 1, seg.domain, seg.severity, n, self.source_spec))
                out[seg.label] = {"mu": mu.tolist(), "sigma": sd.tolist()}
        return out

    def to_dict(self, with_truth: bool = True) -> dict:
        doc = {
            "kind": self.kind,
            "seed": self.seed,
            "source_spec": self.source_spec.to_dict(),
            "segments": [{"domain": s.domain.name, "severity": s.severity, "count": s.count, "round": s.round}
                         for s in self.segments],
            "domains": {s.domain.name: s.domain.to_dict() for s in self.segments},
        }
        if with_truth:
            doc["truth"] = self.ground_truth()
        return doc

    def to_json(self, with_truth: bool = True) -> str:
        return json.dumps(self.to_dict(with_truth), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "StreamSchedule":
        domains = {k: DomainSpec.from_dict(v) for k, v in doc["domains"].items()}
        ss = doc.get("source_spec", {})
        spec = SourceSpec(**{**ss, "amplitude": tuple(ss["amplitude"]), "base": tuple(ss["base"])}) if ss else SourceSpec()
        segs = [Segment(domains[s["domain"]], int(s["severity"]), int(s["count"]), int(s.get("round", 1)))
                for s in doc["segments"]]
        return cls(segs, int(doc.get("seed", 0)), doc.get("kind", "custom"), spec)

    @classmethod
    def from_json(cls, text: str) -> "StreamSchedule":
        return cls.from_dict(json.loads(text))


def continual_schedule(domains, rounds: int = 10, samples_per_domain: int = 100, severity: int = 5,
                       seed: int = 0, source_spec: SourceSpec | None = None) -> StreamSchedule:
    """The domain sequence repeated ``rounds`` times, one segment per (round, domain)."""
    if not domains:
        raise ValueError("domains must be non-empty")
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    if severity not in SEVERITIES:
        raise InvalidSeverity(f"severity must be one of 1..5, got {severity!r}")
    segs = [Segment(d, severity, samples_per_domain, r) for r in range(1, rounds + 1) for d in domains]
    return StreamSchedule(segs, seed, "continual", source_spec or SourceSpec())


def gradual_schedule(domains, samples_per_step: int = 50, seed: int = 0,
                     source_spec: SourceSpec | None = None) -> StreamSchedule:
    """Severity 1..5..1 within each domain, then the next domain."""
    if not domains:
        raise ValueError("domains must be non-empty")
    segs = [Segment(d, s, samples_per_step, 1) for d in domains for s in GRADUAL_LEVELS]
    return StreamSchedule(segs, seed, "gradual", source_spec or SourceSpec())
