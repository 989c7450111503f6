"""Command-line entry point: simulate, track, eval and sweep.

Exit codes: 0 success, 2 usage or configuration error, 3 malformed input
data, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, to_data
from .metrics import AlignmentError, RunResult, expand_grid, particle_ratio, score, sweep, table_row
from .simulator import TraceFormatError, read_trace_csv, read_truth_csv, replay_arrays, synthesize_trace
from .tracker import TrackResult, track

log = logging.getLogger("rssdfl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

ESTIMATE_HEADER = ["t", "px", "vx", "py", "vy", "event"]
PARTICLE_HEADER = ["t", "particle", "px", "py"]


@dataclasses.dataclass
class RunManifest:
    """Everything needed to re-run a command; written before any result."""

    command: str
    config: dict[str, Any]
    seed: int
    version: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    started: str
    elapsed_s: float | None = None
    manifest_version: int = 1

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n", encoding="utf-8")


class _Session:
    """Output directory with a manifest that is written up front and
    completed with the elapsed time at the end."""

    def __init__(self, command: str, cfg: RunConfig, out: Path, outputs: dict[str, str], inputs=None):
        out.mkdir(parents=True, exist_ok=True)
        self.out = out
        self.t0 = time.perf_counter()
        self.manifest = RunManifest(
            command=command,
            config=to_data(cfg),
            seed=cfg.seed,
            version=__version__,
            inputs={k: str(v) for k, v in (inputs or {}).items()},
            outputs={k: str(out / v) for k, v in outputs.items()},
            started=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        )
        self.manifest.write(out / "manifest.json")

    def path(self, name: str) -> Path:
        return Path(self.manifest.outputs[name])

    def finish(self) -> None:
        self.manifest.elapsed_s = round(time.perf_counter() - self.t0, 3)
        self.manifest.write(self.out / "manifest.json")


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


# -- simulate ---------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig) -> int:
    session = _Session("simulate", cfg, Path(args.out), {"trace": "trace.csv", "truth": "truth.csv"})
    trace = synthesize_trace(cfg.scenario)
    trace.write_csv(session.path("trace"), session.path("truth"))
    session.finish()
    log.info("wrote %d samples for %d links to %s", len(trace.t), len(trace.link_ids), args.out)
    return EXIT_OK


# -- track ------------------------------------------------------------------


def _ordered_links(cfg: RunConfig, link_ids: Sequence[str]):
    by_id = {link.id: link for link in cfg.scenario.links}
    missing = [lid for lid in link_ids if lid not in by_id]
    if missing:
        raise TraceFormatError(f"trace links {missing} are not defined in the configuration")
    return [by_id[lid] for lid in link_ids]


def run_track(cfg: RunConfig, trace_path, use_freq: bool | None = None):
    """Replay a trace file through the gated filter; returns the result, the
    replayed measurements and the link ids in trace order."""
    trace = read_trace_csv(trace_path)
    links = _ordered_links(cfg, trace.link_ids)
    tcfg = cfg.effective_tracker(use_freq)
    if not math.isclose(trace.sample_interval, tcfg.sample_interval, rel_tol=1e-6):
        log.info("using the trace sample interval %.6g s", trace.sample_interval)
        tcfg = dataclasses.replace(tcfg, spectral=dataclasses.replace(tcfg.spectral, sample_interval=trace.sample_interval))
    meas = replay_arrays(trace, tcfg.spectral, cfg.track.calibration_window)
    result = track(meas, links, tcfg, cfg.seeds()[1], cfg.heading_hint(), keep_particles=cfg.track.snapshot_stride > 0)
    return result, meas, trace.link_ids


def write_estimates(path, result: TrackResult) -> None:
    rows: dict[int, list] = {}
    for j, k in enumerate(result.k):
        px, vx, py, vy = result.estimates[j]
        rows[int(k)] = [_fmt(result.t[k]), _fmt(px), _fmt(vx), _fmt(py), _fmt(vy), ""]
    for k, ev in result.events.items():
        row = rows.setdefault(int(k), [_fmt(result.t[k]), "", "", "", "", ""])
        row[5] = ev.value
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_HEADER)
        for k in sorted(rows):
            w.writerow(rows[k])


def write_diagnostics(path, result: TrackResult, meas, link_ids: Sequence[str]) -> None:
    header = ["t"]
    for lid in link_ids:
        header += [f"state_{lid}", f"r_{lid}", f"R_{lid}", f"R_valid_{lid}"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(result.t)):
            row = [_fmt(result.t[k])]
            for li in range(len(link_ids)):
                row += [
                    int(result.link_states[li, k]),
                    _fmt(meas.r[li, k]),
                    _fmt(meas.freq[li, k]),
                    int(bool(meas.freq_valid[li, k])),
                ]
            w.writerow(row)


def write_particles(path, result: TrackResult, stride: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PARTICLE_HEADER)
        if not result.particles or stride <= 0:
            return
        for j in range(0, len(result.k), stride):
            t = _fmt(result.t[result.k[j]])
            for i, (px, py) in enumerate(result.particles[j]):
                w.writerow([t, i, repr(float(px)), repr(float(py))])


def cmd_track(args, cfg: RunConfig) -> int:
    outputs = {"estimates": "estimates.csv", "diagnostics": "diagnostics.csv", "particles": "particles.csv"}
    session = _Session("track", cfg, Path(args.out), outputs, {"trace": args.trace})
    result, meas, link_ids = run_track(cfg, args.trace)
    write_estimates(session.path("estimates"), result)
    write_diagnostics(session.path("diagnostics"), result, meas, link_ids)
    write_particles(session.path("particles"), result, cfg.track.snapshot_stride)
    session.finish()
    if len(result.k) == 0:
        log.info("no crossing detected; estimates are empty")
    else:
        log.info("%d estimates, %d degenerate updates", len(result.k), result.degenerate_count)
    return EXIT_OK


# -- eval -------------------------------------------------------------------


def _read_rows(path, required: Sequence[str]) -> list[dict[str, str]]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise TraceFormatError(f"{path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise TraceFormatError(f"{path}: missing columns {missing}", 1)
        return list(reader)


def _floats(rows, name: str, path) -> np.ndarray:
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        text = row[name]
        try:
            out[i] = float(text) if text != "" else np.nan
        except ValueError:
            raise TraceFormatError(f"{path}: bad {name} value {text!r}", i + 2) from None
    return out


def _align(t_query: np.ndarray, t_ref: np.ndarray, tol: float) -> np.ndarray:
    """Index into ``t_ref`` of every query time, or AlignmentError."""
    idx = np.clip(np.searchsorted(t_ref, t_query), 0, max(len(t_ref) - 1, 0))
    if len(t_ref) == 0 and len(t_query):
        raise AlignmentError("truth file is empty")
    best = idx.copy()
    left = np.maximum(idx - 1, 0)
    closer = np.abs(t_ref[left] - t_query) < np.abs(t_ref[idx] - t_query)
    best[closer] = left[closer]
    bad = np.abs(t_ref[best] - t_query) > tol
    if np.any(bad):
        raise AlignmentError(f"{int(bad.sum())} estimate times have no matching truth sample")
    return best


def evaluate_files(estimates_path, truth_path, particles_path, cfg: RunConfig) -> RunResult:
    rows = _read_rows(estimates_path, ESTIMATE_HEADER[:5])
    t = _floats(rows, "t", estimates_path)
    est = np.column_stack([_floats(rows, "px", estimates_path), _floats(rows, "py", estimates_path)])
    keep = ~np.isnan(est).any(axis=1)
    t, est = t[keep], est[keep]
    truth = read_truth_csv(truth_path)
    tol = 0.25 * cfg.scenario.sample_interval
    k = _align(t, truth.t, tol)
    pos = truth.position[k]
    if np.isnan(pos).any():
        raise AlignmentError("estimates exist at times where the truth has no person")
    rr = score(pos, est, cfg.tracker.ellipse, seed=cfg.seeds()[1])
    if particles_path is None:
        return rr
    prow = _read_rows(particles_path, PARTICLE_HEADER)
    pt = _floats(prow, "t", particles_path)
    if len(pt) == 0:
        return rr
    pxy = np.column_stack([_floats(prow, "px", particles_path), _floats(prow, "py", particles_path)])
    snap_t, inverse = np.unique(pt, return_inverse=True)
    j = k[_align(snap_t, t, tol)]
    sets = [pxy[inverse == u] for u in range(len(snap_t))]
    headings = np.arctan2(truth.velocity[j, 1], truth.velocity[j, 0])
    pct = particle_ratio(sets, truth.position[j], cfg.tracker.ellipse, headings)
    return dataclasses.replace(rr, eps_pct=pct)


def cmd_eval(args, cfg: RunConfig) -> int:
    inputs = {"estimates": args.estimates, "truth": args.truth}
    if args.particles:
        inputs["particles"] = args.particles
    session = _Session("eval", cfg, Path(args.out), {"metrics": "metrics.json", "table": "table.csv"}, inputs)
    rr = evaluate_files(args.estimates, args.truth, args.particles, cfg)
    session.path("metrics").write_text(json.dumps(to_data(dataclasses.asdict(rr)), indent=2) + "\n", encoding="utf-8")
    row = table_row(rr)
    with open(session.path("table"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
    session.finish()
    print("  ".join(f"{k}: {v}" for k, v in row.items()))
    return EXIT_OK


# -- sweep ------------------------------------------------------------------


def cmd_sweep(args, cfg: RunConfig) -> int:
    grid = dict(cfg.sweep.grid)
    if args.use_freq is not None:
        if "use_freq" in grid:
            raise ConfigError("--use-freq conflicts with a use_freq axis in sweep.grid")
        grid["use_freq"] = [args.use_freq]
    try:
        cells = expand_grid(grid)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sweep.grid: {exc}") from None
    session = _Session("sweep", cfg, Path(args.out), {"runs": "runs.csv", "cells": "cells.csv"})
    res = sweep(cells, cfg.sweep.runs_per_cell, cfg.scenario, cfg.tracker, cfg.seed, args.jobs)
    res.write_csv(session.path("runs"), session.path("cells"))
    session.finish()
    failed = sum(1 for r in res.runs if r["error"])
    if failed:
        log.warning("%d of %d runs failed", failed, len(res.runs))
    if failed == len(res.runs):
        log.error("every run failed")
        return EXIT_RUNTIME
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration or a manifest from an earlier run")
    common.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rssdfl", description="Device-free tracking from RSS measurements.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthesize a trace and its ground truth")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", parents=[common], help="run the tracker over a trace file")
    p.add_argument("trace")
    p.add_argument("--use-freq", type=_on_off, metavar="on|off", help="include the frequency residual")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", parents=[common], help="score estimates against ground truth")
    p.add_argument("estimates")
    p.add_argument("truth")
    p.add_argument("--particles", help="particle snapshot file for the particle ratio")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="seeded Monte Carlo grid")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--use-freq", type=_on_off, metavar="on|off", help="fix the variant when the grid has no use_freq axis")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config, args.set, args.seed)
        if getattr(args, "use_freq", None) is not None and args.command == "track":
            cfg.tracker = dataclasses.replace(cfg.tracker, use_freq=args.use_freq)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"rssdfl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TraceFormatError, AlignmentError) as exc:
        print(f"rssdfl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        log.debug("failure", exc_info=True)
        print(f"rssdfl: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
