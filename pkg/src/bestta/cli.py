"""Command line entry point: ``bestta <verb> [options]``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .adapter import AdapterConfig, SourceCalibration, calibrate_source
from .baselines import BaselineKind
from .bench import (
    Protocol,
    emit_report,
    read_diagnostics,
    run_baseline,
    run_dirname,
    stream_digest,
)
from .bench import ablate as run_ablation
from .exceptions import BesttaError, IoFailure
from .models import ModelFixture, pretrain as train_fixture
from .runner import RunReport
from .simulator import StreamSchedule, default_domains, gradual_schedule

SEED = click.IntRange(0, 2**64 - 1)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write_json(path: Path, doc) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _load_config(path) -> AdapterConfig:
    return AdapterConfig.from_dict(_load_json(path)) if path else AdapterConfig()


def _load_schedule(path, protocol: Protocol) -> StreamSchedule:
    return StreamSchedule.from_json(Path(path).read_text(encoding="utf-8")) if path else protocol.schedule()


def _load_calibration(path, model, protocol: Protocol, insertion_index: int) -> SourceCalibration:
    if path:
        return SourceCalibration.from_dict(_load_json(path))
    return calibrate_source(model, protocol.calibration_samples(), insertion_index)


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (BesttaError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(2)


@click.group(cls=_Group)
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Single-image continual test-time adaptation benchmark."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--seed", type=SEED, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Fixture file to write.")
@click.option("--epochs", type=click.IntRange(1), default=6, show_default=True)
@click.option("--n-train", type=click.IntRange(1), default=1200, show_default=True)
@click.option("--head", type=click.Choice(["dense", "pool"]), default="dense", show_default=True)
def pretrain(seed, out, epochs, n_train, head):
    """Train and freeze the toy source model."""
    fx = train_fixture(seed=seed, epochs=epochs, n_train=n_train, head_kind=head)
    fx.save(out)
    click.echo(f"train {fx.train_accuracy:.4f} heldout {fx.heldout_accuracy:.4f} -> {out}")


@main.command()
@click.option("--kind", type=click.Choice(["continual", "gradual"]), default="continual", show_default=True)
@click.option("--seed", type=SEED, default=0, show_default=True)
@click.option("--rounds", type=click.IntRange(1), default=10, show_default=True)
@click.option("--samples", type=click.IntRange(1), default=100, show_default=True,
              help="Images per segment.")
@click.option("--severity", type=click.IntRange(1, 5), default=5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def schedule(kind, seed, rounds, samples, severity, out):
    """Write a replayable stream schedule as JSON."""
    if kind == "continual":
        sched = Protocol(seed=seed, rounds=rounds, samples_per_domain=samples, severity=severity).schedule()
    else:
        sched = gradual_schedule(default_domains(), samples, seed=Protocol(seed=seed).seeds()["stream"])
    try:
        Path(out).write_text(sched.to_json() + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {out}: {exc}") from exc
    click.echo(f"{len(sched)} segments, {sched.total_samples} images -> {out}")


@main.command()
@click.option("--fixture", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--seed", type=SEED, default=0, show_default=True)
@click.option("--config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def calibrate(fixture, seed, config, out):
    """Collect source anchor statistics and the mean source embedding."""
    fx = ModelFixture.load(fixture)
    cfg = _load_config(config)
    calib = calibrate_source(fx.model, Protocol(seed=seed).calibration_samples(), cfg.insertion_index)
    _write_json(Path(out), calib.to_dict())
    click.echo(f"{calib.sample_count} source images at block {calib.insertion_index} -> {out}")


def _common(f):
    options = [
        click.option("--fixture", type=click.Path(exists=True, dir_okay=False), required=True),
        click.option("--schedule", "schedule_path", type=click.Path(exists=True, dir_okay=False),
                     help="Stream schedule JSON (default: the built-in continual protocol)."),
        click.option("--config", type=click.Path(exists=True, dir_okay=False), help="AdapterConfig JSON."),
        click.option("--calibration", type=click.Path(exists=True, dir_okay=False)),
        click.option("--out", type=click.Path(file_okay=False), required=True),
        click.option("--seed", type=SEED, default=0, show_default=True),
        click.option("--no-eval", is_flag=True, help="Skip the per-round source-set evaluation."),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


def _setup(fixture, schedule_path, config, seed, no_eval):
    fx = ModelFixture.load(fixture)
    protocol = Protocol(seed=seed)
    sched = _load_schedule(schedule_path, protocol)
    cfg = _load_config(config)
    eval_set = None if no_eval else protocol.eval_set(fx.model.head_kind == "dense")
    return fx, protocol, sched, cfg, eval_set


@main.command()
@_common
@click.option("--baseline", type=click.Choice([k.value for k in BaselineKind]), default="bestta",
              show_default=True)
def run(fixture, schedule_path, config, calibration, out, seed, no_eval, baseline):
    """Adapt over a stream with one method and write the report files."""
    fx, protocol, sched, cfg, eval_set = _setup(fixture, schedule_path, config, seed, no_eval)
    calib = _load_calibration(calibration, fx.model, protocol, cfg.insertion_index)
    report = run_baseline(baseline, fx.model, sched, cfg, calib, eval_set, protocol.seeds())
    emit_report([report], out)
    _write_json(Path(out) / "config.json", {"baseline": baseline, "adapter": cfg.to_dict(),
                                            "seeds": report.seeds, "fixture": str(fixture),
                                            "schedule": schedule_path or "builtin"})
    rounds = " ".join(f"{100 * v:.1f}" for v in report.round_means().values())
    click.echo(f"{baseline}: mean {100 * report.mean_accuracy:.2f} | rounds {rounds}")


@main.command()
@_common
@click.option("--grid", default="loss", show_default=True,
              help="'loss', 'insertion' or a lattice like 'rho=0.5,0.7;lr=0.001,0.01'.")
@click.option("--workers", type=click.IntRange(1), default=1, show_default=True)
def ablate(fixture, schedule_path, config, calibration, out, seed, no_eval, grid, workers):
    """Run BESTTA once per grid cell on the same stream."""
    fx, protocol, sched, cfg, eval_set = _setup(fixture, schedule_path, config, seed, no_eval)
    results = run_ablation(grid, cfg, fx.model, sched, protocol.calibration_samples(), eval_set, workers,
                           protocol.seeds())
    reports = [r for r in results if isinstance(r, RunReport)]
    failures = [r for r in results if not isinstance(r, RunReport)]
    if reports:
        emit_report(reports, out)
    _write_json(Path(out) / "config.json", {"grid": grid, "adapter": cfg.to_dict(), "seeds": protocol.seeds(),
                                            "stream_digest": stream_digest(sched),
                                            "failures": [vars(f) for f in failures]})
    for r in results:
        if isinstance(r, RunReport):
            click.echo(f"{r.label:28s} mean {100 * r.mean_accuracy:.2f}")
        else:
            click.echo(f"{r.name:28s} FAILED {r.error}")
    if failures:
        sys.exit(1)


@main.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
def report(inputs, out):
    """Merge report.json files from run directories into one report."""
    reports = []
    for d in map(Path, inputs):
        doc = _load_json(d / "report.json")
        single = len(doc["reports"]) == 1
        for item in doc["reports"]:
            rep = RunReport.from_dict(item)
            diag = d / "diagnostics.csv" if single else d / "runs" / run_dirname(rep.label) / "diagnostics.csv"
            if diag.exists():
                rep.diagnostics = read_diagnostics(diag)
            reports.append(rep)
    emit_report(reports, out)
    click.echo(f"{len(reports)} reports -> {out}")


@main.command()
def selftest():
    """Run the fast invariant suites."""
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        click.echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        sys.exit(1)


if __name__ == "__main__":  # pragma: no cover
    main()
