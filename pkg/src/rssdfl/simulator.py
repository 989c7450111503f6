"""Scenario generation, per-channel RSS synthesis, trace files and replay."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Link, Point2
from .rss_model import (
    EllipseParams,
    PropagationState,
    ReflectionParams,
    ellipse_rotation,
    mean_remove_and_combine,
    reflection_gain,
    shadow_gain,
    true_state,
)
from .spectral import SpectralConfig, psd_peaks

TRACE_HEADER = ["t", "link", "channel", "rss_dbm"]


class TraceFormatError(ValueError):
    """Malformed trace or truth file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def corridor_links(width: float = 3.0, third_receiver: bool = False, carrier_frequency: float = 2.4e9) -> list[Link]:
    """One TX at the origin, receivers on the opposite wall a meter apart."""
    rx = [(0.0, width), (1.0, width)]
    if third_receiver:
        rx.insert(1, (0.5, width))
    return [Link(f"link{i}", (0.0, 0.0), p, carrier_frequency) for i, p in enumerate(rx)]


@dataclass(frozen=True)
class TrajectoryConfig:
    start: Point2 = Point2(-2.25, 1.5)
    speed: float = 0.5
    heading: float = 0.0  # rad
    duration: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "start", Point2(*map(float, self.start)))
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if not self.duration > 0:
            raise ValueError("duration must be positive")

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])

    @classmethod
    def through(cls, point, heading: float, speed: float = 0.5, duration: float = 10.0) -> "TrajectoryConfig":
        """Constant-velocity path that passes ``point`` at half the duration."""
        v = speed * np.array([math.cos(heading), math.sin(heading)])
        start = np.asarray(point, dtype=float) - 0.5 * duration * v
        return cls(Point2(*start), speed, heading, duration)


@dataclass
class ScenarioConfig:
    links: list[Link] = field(default_factory=corridor_links)
    channels: int = 16
    sample_interval: float = 0.032
    trajectory: TrajectoryConfig = field(
        default_factory=lambda: TrajectoryConfig.through((0.25, 1.5), 0.0)
    )
    noise_std: float | list[float] = 1.0  # per-channel dB
    system_gains: list[float] | None = None  # dB, defaults to a fixed spread
    reflection: ReflectionParams = field(default_factory=ReflectionParams)
    ellipse: EllipseParams = field(default_factory=EllipseParams)
    n_max: int = 12
    preamble: float = 5.0
    quantize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if not self.sample_interval > 0:
            raise ValueError("sample_interval must be positive")
        if not self.links:
            raise ValueError("at least one link is required")
        if len({l.id for l in self.links}) != len(self.links):
            raise ValueError("link ids must be unique")
        if self.preamble < 0:
            raise ValueError("preamble must be non-negative")
        if np.any(np.asarray(self.channel_noise_std) < 0):
            raise ValueError("noise_std must be non-negative")
        if self.system_gains is not None and len(self.system_gains) != self.channels:
            raise ValueError("system_gains must have one entry per channel")

    @property
    def channel_noise_std(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.noise_std, dtype=float), (self.channels,))

    @property
    def channel_gains(self) -> np.ndarray:
        if self.system_gains is not None:
            return np.asarray(self.system_gains, dtype=float)
        return -48.0 - 0.5 * np.arange(self.channels)

    @property
    def n_samples(self) -> int:
        return self.n_preamble + self.n_walk

    @property
    def n_preamble(self) -> int:
        return int(round(self.preamble / self.sample_interval))

    @property
    def n_walk(self) -> int:
        return int(round(self.trajectory.duration / self.sample_interval))


@dataclass
class Truth:
    t: np.ndarray  # (K,)
    position: np.ndarray  # (K, 2), NaN while the room is empty
    velocity: np.ndarray  # (K, 2)
    states: np.ndarray  # (L, K) PropagationState values
    heading: float = 0.0

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.position[:, 0])


@dataclass
class RssTrace:
    """Per-link, per-channel RSS on a common sample grid.

    ``rss`` has shape (links, samples, channels); missing samples are NaN.
    """

    t: np.ndarray
    link_ids: list[str]
    rss: np.ndarray
    sample_interval: float
    truth: Truth | None = None

    @property
    def n_channels(self) -> int:
        return self.rss.shape[2]

    def write_csv(self, trace_path, truth_path=None) -> None:
        with open(trace_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for k, t in enumerate(self.t):
                for li, lid in enumerate(self.link_ids):
                    for c in range(self.n_channels):
                        v = self.rss[li, k, c]
                        if not np.isnan(v):
                            w.writerow([repr(float(t)), lid, c, repr(float(v))])
        if truth_path is not None:
            if self.truth is None:
                raise ValueError("trace carries no truth")
            write_truth_csv(self.truth, self.link_ids, truth_path)

    @classmethod
    def read_csv(cls, trace_path, truth_path=None, sample_interval: float | None = None) -> "RssTrace":
        trace = read_trace_csv(trace_path, sample_interval)
        if truth_path is not None:
            trace.truth = read_truth_csv(truth_path, trace.link_ids)
        return trace


def generate_trajectory(cfg: ScenarioConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampled times, positions and velocities of the walk (preamble excluded)."""
    traj = cfg.trajectory
    n = cfg.n_walk
    t = np.arange(n) * cfg.sample_interval
    v = traj.velocity
    pos = np.asarray(traj.start) + t[:, None] * v
    return t, pos, np.tile(v, (n, 1))


def synthesize_trace(cfg: ScenarioConfig) -> RssTrace:
    """Noisy per-channel RSS for every link, with an empty-room preamble."""
    rng = np.random.default_rng(cfg.seed)
    K = cfg.n_samples
    n_pre = cfg.n_preamble
    t = np.arange(K) * cfg.sample_interval
    _, walk, walk_v = generate_trajectory(cfg)
    pos = np.full((K, 2), np.nan)
    vel = np.zeros((K, 2))
    pos[n_pre:] = walk
    vel[n_pre:] = walk_v
    present = ~np.isnan(pos[:, 0])

    L, C = len(cfg.links), cfg.channels
    g = np.zeros((L, K))
    states = np.full((L, K), int(PropagationState.NON_FADING))
    heading = cfg.trajectory.heading
    for li, link in enumerate(cfg.links):
        theta = ellipse_rotation(heading, link)
        p = pos[present]
        s = true_state(p, link, cfg.ellipse, theta, cfg.n_max)
        gl = np.zeros(len(p))
        refl = s == PropagationState.REFLECTION
        shad = s == PropagationState.SHADOWING
        if refl.any():
            gl[refl] = reflection_gain(p[refl], link, cfg.reflection)
        if shad.any():
            gl[shad] = -np.asarray(shadow_gain(p[shad], link, cfg.ellipse, theta))
        g[li, present] = gl
        states[li, present] = s

    noise = rng.standard_normal((L, K, C)) * cfg.channel_noise_std
    rss = cfg.channel_gains + g[:, :, None] + noise
    if cfg.quantize:
        rss = np.round(rss)
    truth = Truth(t, pos, vel, states, heading)
    return RssTrace(t, [l.id for l in cfg.links], rss, cfg.sample_interval, truth)


def write_truth_csv(truth: Truth, link_ids: list[str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "px", "py", "vx", "vy"] + [f"state_{lid}" for lid in link_ids])
        for k, t in enumerate(truth.t):
            px, py = truth.position[k]
            vx, vy = truth.velocity[k]
            w.writerow(
                [repr(float(t)), repr(float(px)), repr(float(py)), repr(float(vx)), repr(float(vy))]
                + [int(truth.states[li, k]) for li in range(len(link_ids))]
            )


def _float(text: str, line: int, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise TraceFormatError(f"bad {what} value {text!r}", line) from None


def read_truth_csv(path, link_ids: list[str] | None = None) -> Truth:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != ["t", "px", "py", "vx", "vy"]:
            raise TraceFormatError("truth header must start with t,px,py,vx,vy", 1)
        state_cols = header[5:]
        if link_ids is not None and state_cols != [f"state_{lid}" for lid in link_ids]:
            raise TraceFormatError(f"truth state columns {state_cols} do not match links {link_ids}", 1)
        rows = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise TraceFormatError(f"expected {len(header)} fields, got {len(row)}", line)
            rows.append([_float(x, line, name) for x, name in zip(row, header)])
    a = np.asarray(rows, dtype=float).reshape(-1, len(header))
    vel = a[:, 3:5]
    moving = np.flatnonzero(~np.isnan(a[:, 1]) & (np.hypot(vel[:, 0], vel[:, 1]) > 0))
    heading = float(np.arctan2(vel[moving[0], 1], vel[moving[0], 0])) if moving.size else 0.0
    return Truth(a[:, 0], a[:, 1:3], vel, a[:, 5:].T.astype(int), heading)


def _infer_interval(t: np.ndarray, links: list[str], chans: list[int]) -> float:
    # Spacing within each (link, channel) stream; robust to staggered channels.
    keys = np.array([f"{l}\x00{c}" for l, c in zip(links, chans)])
    spacings = []
    for key in np.unique(keys):
        ts = np.sort(t[keys == key])
        if ts.size > 1:
            spacings.append(np.median(np.diff(ts)))
    if not spacings:
        return 0.032
    # differences of decimal timestamps carry float noise; 1 ns is far below any sensible interval
    return round(float(np.median(spacings)), 9)


def read_trace_csv(path, sample_interval: float | None = None) -> RssTrace:
    """Parse a trace CSV onto a regular grid of ``sample_interval`` slots.

    Rows are binned by ``floor((t - t0) / T_s)``, so channels sampled at
    staggered instants within a slot share one sample index. When
    ``sample_interval`` is None it is inferred from the timestamps.
    """
    times, links, chans, vals = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise TraceFormatError(f"header must be {','.join(TRACE_HEADER)}", 1)
        for line, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise TraceFormatError(f"expected 4 fields, got {len(row)}", line)
            times.append(_float(row[0], line, "t"))
            links.append(row[1])
            try:
                c = int(row[2])
            except ValueError:
                raise TraceFormatError(f"bad channel {row[2]!r}", line) from None
            if c < 0:
                raise TraceFormatError(f"negative channel {c}", line)
            chans.append(c)
            vals.append(_float(row[3], line, "rss_dbm"))

    link_ids = list(dict.fromkeys(links))
    if not times:
        T_s = sample_interval or 0.032
        return RssTrace(np.array([]), link_ids, np.empty((0, 0, 0)), T_s)

    t = np.asarray(times)
    if sample_interval is None:
        sample_interval = _infer_interval(t, links, chans)
    t0 = t.min()
    k = np.floor((t - t0) / sample_interval + 1e-6).astype(int)
    K = int(k.max()) + 1
    C = max(chans) + 1
    li = np.array([link_ids.index(l) for l in links])
    rss = np.full((len(link_ids), K, C), np.nan)
    rss[li, k, np.asarray(chans)] = vals
    grid = t0 + np.arange(K) * sample_interval
    return RssTrace(grid, link_ids, rss, sample_interval)


@dataclass
class LinkMeasurement:
    r: float  # combined mean-removed RSS [dB]
    freq: float  # PSD peak [Hz]
    freq_valid: bool
    n_channels: int


@dataclass
class StepMeasurement:
    k: int
    t: float
    links: list[LinkMeasurement]


def combine_trace(trace: RssTrace, calibration_window: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    """Combined mean-removed RSS per link, shape (L, K), and channel counts."""
    n_cal = max(1, int(round(calibration_window / trace.sample_interval)))
    cal = trace.rss[:, :n_cal, :]
    n_obs = np.sum(~np.isnan(cal), axis=1)
    means = np.nansum(cal, axis=1) / np.maximum(n_obs, 1)
    means[n_obs == 0] = np.nan
    r = np.stack([mean_remove_and_combine(trace.rss[li], means[li]) for li in range(len(trace.link_ids))])
    counts = np.sum(~np.isnan(trace.rss), axis=2)
    return r, counts


@dataclass
class MeasurementArrays:
    """Replayed measurements as (links, samples) arrays."""

    t: np.ndarray
    r: np.ndarray
    freq: np.ndarray
    freq_valid: np.ndarray
    n_channels: np.ndarray

    def steps(self) -> list[StepMeasurement]:
        L, K = self.r.shape
        out = []
        for k in range(K):
            links = [
                LinkMeasurement(
                    float(self.r[li, k]), float(self.freq[li, k]), bool(self.freq_valid[li, k]), int(self.n_channels[li, k])
                )
                for li in range(L)
            ]
            out.append(StepMeasurement(k, float(self.t[k]), links))
        return out


def replay_arrays(trace: RssTrace, spectral: SpectralConfig | None = None, calibration_window: float = 5.0) -> MeasurementArrays:
    K, L = len(trace.t), len(trace.link_ids)
    if K == 0:
        empty = np.zeros((L, 0))
        return MeasurementArrays(np.array([]), empty, empty, empty.astype(bool), empty.astype(int))
    spectral = spectral or SpectralConfig(sample_interval=trace.sample_interval)
    r, counts = combine_trace(trace, calibration_window)
    n = spectral.window_len
    freq = np.zeros((L, K))
    valid = np.zeros((L, K), dtype=bool)
    if K >= n:
        for li in range(L):
            x = np.nan_to_num(r[li], nan=0.0)
            windows = np.lib.stride_tricks.sliding_window_view(x, n)
            f, ok, _ = psd_peaks(windows, spectral)
            freq[li, n - 1 :] = f
            valid[li, n - 1 :] = ok
    return MeasurementArrays(np.asarray(trace.t, dtype=float), r, freq, valid, counts)


def replay(trace: RssTrace, spectral: SpectralConfig | None = None, calibration_window: float = 5.0) -> list[StepMeasurement]:
    """Per-step combined RSS and PSD-peak measurements for every link, in time order."""
    return replay_arrays(trace, spectral, calibration_window).steps()
