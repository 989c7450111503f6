"""Tracking accuracy metrics and the seeded Monte Carlo sweep harness."""
from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Iterable

import numpy as np

from .link_state_hmm import HmmConfig
from .rss_model import EllipseParams
from .simulator import ScenarioConfig, TrajectoryConfig, corridor_links, replay_arrays, synthesize_trace
from .tracker import InitConfig, Region, TrackerConfig, TrackResult, track

log = logging.getLogger(__name__)


class AlignmentError(ValueError):
    """Truth and estimate sequences do not line up."""


@dataclass
class RunResult:
    eps_x: float  # cm
    eps_y: float  # cm
    sigma_x: float  # cm
    sigma_y: float  # cm
    eps_pct: float  # percent of particles inside the person ellipse
    K: int
    seed: int | None = None

    @classmethod
    def empty(cls, seed=None) -> "RunResult":
        nan = float("nan")
        return cls(nan, nan, nan, nan, nan, 0, seed)


def mae(truth, estimates) -> tuple[float, float]:
    """Mean absolute x and y errors of aligned (K, 2) position sequences."""
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if truth.shape != estimates.shape or truth.ndim != 2 or truth.shape[1] != 2:
        raise AlignmentError(f"shape mismatch: truth {truth.shape} vs estimates {estimates.shape}")
    if len(truth) == 0:
        raise AlignmentError("no estimates to score")
    err = np.mean(np.abs(truth - estimates), axis=0)
    return float(err[0]), float(err[1])


def in_ellipse(points, centre, heading: float, ell: EllipseParams) -> np.ndarray:
    """Membership in the person ellipse: semi-minor axis along ``heading``."""
    d = np.asarray(points, dtype=float) - np.asarray(centre, dtype=float)
    c, s = math.cos(heading), math.sin(heading)
    along = d[..., 0] * c + d[..., 1] * s
    across = -d[..., 0] * s + d[..., 1] * c
    return (along / ell.A) ** 2 + (across / ell.B) ** 2 <= 1.0


def particle_ratio(particle_sets: Iterable, truth, ell: EllipseParams, heading=0.0) -> float:
    """Percentage of particles inside the person ellipse, pooled over time.

    ``heading`` is a scalar or one orientation per time step.
    """
    truth = np.asarray(truth, dtype=float)
    sets = list(particle_sets)
    if len(sets) != len(truth):
        raise AlignmentError(f"{len(sets)} particle sets vs {len(truth)} truth positions")
    if not sets:
        return float("nan")
    headings = np.broadcast_to(np.asarray(heading, dtype=float), (len(sets),))
    inside = total = 0
    for ps, centre, h in zip(sets, truth, headings):
        ps = np.asarray(ps, dtype=float)
        inside += int(np.count_nonzero(in_ellipse(ps, centre, float(h), ell)))
        total += len(ps)
    return 100.0 * inside / total


def score(truth, estimates, ell: EllipseParams, particle_sets=None, heading=0.0, seed=None) -> RunResult:
    """Errors in cm of aligned (K, 2) truth and estimate positions, plus the
    particle ratio when snapshots are given (one per row of ``truth``)."""
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(estimates, dtype=float)
    if len(truth) == 0 and len(est) == 0:
        return RunResult.empty(seed)
    ex, ey = mae(truth, est)
    err = np.abs(truth - est)
    pct = float("nan")
    if particle_sets is not None:
        pct = particle_ratio(particle_sets, truth, ell, heading)
    return RunResult(100 * ex, 100 * ey, 100 * float(err[:, 0].std()), 100 * float(err[:, 1].std()), pct, len(truth), seed)


def evaluate(result: TrackResult, truth_position, heading: float, ell: EllipseParams, seed=None) -> RunResult:
    """Score a tracking run against truth over the steps with an estimate."""
    if len(result.k) == 0:
        return RunResult.empty(seed)
    truth = np.asarray(truth_position, dtype=float)[result.k]
    return score(truth, result.estimates[:, [0, 2]], ell, result.particles, heading, seed)


def table_row(rr: RunResult) -> dict[str, str]:
    """Accuracy in the usual table layout: mean ± std errors [cm] and ratio [%]."""
    return {
        "eps_x [cm]": f"{rr.eps_x:.2f} ± {rr.sigma_x:.2f}",
        "eps_y [cm]": f"{rr.eps_y:.2f} ± {rr.sigma_y:.2f}",
        "eps_pct [%]": f"{rr.eps_pct:.2f}",
    }


# -- scenario runs ----------------------------------------------------------

INIT_PRESETS = {
    "wide": InitConfig(speed_max=2.0, heading_spread=math.pi / 4),
    "narrow": InitConfig(speed_max=1.0, heading_spread=math.pi / 8),
}


@dataclass(frozen=True)
class CellSpec:
    """One grid cell of a sweep."""

    theta_deg: float = 20.0
    noise_std: float = 1.0
    n_particles: int = 512
    use_freq: bool = True
    init: str = "wide"
    receivers: int = 2
    width: float = 3.0
    speed: float = 0.5
    region_margin: float | None = 0.2  # None disables the corridor prior


def cell_configs(cell: CellSpec, base_scenario: ScenarioConfig, base_tracker: TrackerConfig) -> tuple[ScenarioConfig, TrackerConfig]:
    theta = math.radians(cell.theta_deg)
    links = corridor_links(cell.width, third_receiver=cell.receivers >= 3)
    centre = (0.25, 0.5 * cell.width)
    traj = TrajectoryConfig.through(centre, theta, cell.speed, base_scenario.trajectory.duration)
    scenario = replace(base_scenario, links=links, trajectory=traj, noise_std=cell.noise_std)
    init = replace(INIT_PRESETS[cell.init], perp_std=base_tracker.init.perp_std, velocity_merge=base_tracker.init.velocity_merge)
    hmm = HmmConfig.for_noise(cell.noise_std / math.sqrt(scenario.channels))
    region = None if cell.region_margin is None else Region.corridor(links, cell.region_margin)
    tracker = replace(
        base_tracker, n_particles=cell.n_particles, use_freq=cell.use_freq, init=init, hmm=hmm, region=region
    )
    return scenario, tracker


def run_seeds(master_seed: int, run: int) -> tuple[int, int]:
    """Scenario and filter seeds of one run; shared across cells so that
    variants are compared on identical scenarios."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(run,))
    a, b = ss.generate_state(2)
    return int(a), int(b)


def run_once(scenario: ScenarioConfig, tracker_cfg: TrackerConfig, filter_seed: int) -> tuple[RunResult, TrackResult]:
    trace = synthesize_trace(scenario)
    meas = replay_arrays(trace, tracker_cfg.spectral, scenario.preamble)
    heading = scenario.trajectory.heading
    result = track(meas, scenario.links, tracker_cfg, filter_seed, heading, keep_particles=True)
    rr = evaluate(result, trace.truth.position, heading, tracker_cfg.ellipse, filter_seed)
    return rr, result


def _run_cell_job(args) -> dict[str, Any]:
    cell_index, run, cell, base_scenario, base_tracker, master_seed = args
    scen_seed, filt_seed = run_seeds(master_seed, run)
    scenario, tracker_cfg = cell_configs(cell, base_scenario, base_tracker)
    scenario = replace(scenario, seed=scen_seed)
    row: dict[str, Any] = {"cell": cell_index, "run": run, **asdict(cell)}
    try:
        rr, _ = run_once(scenario, tracker_cfg, filt_seed)
        row.update(asdict(rr))
        row["error"] = ""
    except Exception as exc:  # recorded per run, not fatal
        log.warning("cell %d run %d failed: %s", cell_index, run, exc)
        row.update(asdict(RunResult.empty(filt_seed)))
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


@dataclass
class SweepResult:
    runs: list[dict[str, Any]]
    cells: list[dict[str, Any]]

    def write_csv(self, runs_path, cells_path) -> None:
        _write_rows(runs_path, self.runs)
        _write_rows(cells_path, self.cells)


def _write_rows(path, rows: list[dict[str, Any]]) -> None:
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


METRIC_FIELDS = ("eps_x", "eps_y", "sigma_x", "sigma_y", "eps_pct")


def aggregate(runs: list[dict[str, Any]], cells: list[CellSpec]) -> list[dict[str, Any]]:
    """Per-cell mean and std of every metric over the successful runs."""
    out = []
    for ci, cell in enumerate(cells):
        rows = [r for r in runs if r["cell"] == ci]
        ok = [r for r in rows if not r["error"] and r["K"] > 0]
        agg: dict[str, Any] = {"cell": ci, **asdict(cell), "runs": len(rows), "scored": len(ok)}
        for name in METRIC_FIELDS:
            vals = np.array([r[name] for r in ok], dtype=float)
            agg[f"{name}_mean"] = float(np.mean(vals)) if vals.size else float("nan")
            agg[f"{name}_std"] = float(np.std(vals)) if vals.size else float("nan")
        out.append(agg)
    return out


def expand_grid(grid: dict[str, Iterable]) -> list[CellSpec]:
    """Cartesian product of the listed CellSpec fields."""
    names = {f.name for f in fields(CellSpec)}
    unknown = set(grid) - names
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    keys = list(grid)
    values = [list(grid[k]) for k in keys]
    if any(len(v) == 0 for v in values):
        raise ValueError("grid axes must be non-empty")
    return [CellSpec(**dict(zip(keys, combo))) for combo in itertools.product(*values)]


def sweep(
    grid: dict[str, Iterable] | list[CellSpec],
    runs_per_cell: int = 50,
    base_scenario: ScenarioConfig | None = None,
    base_tracker: TrackerConfig | None = None,
    master_seed: int = 0,
    jobs: int = 1,
) -> SweepResult:
    """Run every grid cell ``runs_per_cell`` times and aggregate."""
    cells = grid if isinstance(grid, list) else expand_grid(grid)
    if not cells:
        raise ValueError("grid is empty")
    base_scenario = base_scenario or ScenarioConfig()
    base_tracker = base_tracker or TrackerConfig()
    jobs_args = [
        (ci, run, cell, base_scenario, base_tracker, master_seed)
        for ci, cell in enumerate(cells)
        for run in range(runs_per_cell)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_cell_job, jobs_args, chunksize=4))
    else:
        runs = [_run_cell_job(a) for a in jobs_args]
    return SweepResult(runs, aggregate(runs, cells))
