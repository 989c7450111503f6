"""Particle filter over the constant-velocity state ``[px, vx, py, vy]``
fusing combined RSS and its PSD-peak frequency, with the HMM-gated
start/stop controller around it."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import ENDPOINT_TOL, Link, excess_path_length, to_link_local
from .link_state_hmm import GateEvent, HmmConfig, LinkStateEstimate, LinkStateHmm, gate_events
from .rss_model import (
    EllipseParams,
    PropagationState,
    ReflectionParams,
    ellipse_rotation,
    reflection_gain_from_excess,
    shadow_loss_from_offset,
)
from .spectral import SpectralConfig, model_frequency_avg

POS = [0, 2]
VEL = [1, 3]


class DegenerateWeightsError(ValueError):
    """All particle weights are zero."""


class KinematicState(NamedTuple):
    px: float
    vx: float
    py: float
    vy: float


@dataclass
class ParticleSet:
    """``states`` is (N, 4) in [px, vx, py, vy] order."""

    states: np.ndarray
    weights: np.ndarray
    rng_seed: int | None = None
    normalized: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != 4 or len(self.states) < 1:
            raise ValueError("states must have shape (N, 4) with N >= 1")
        if self.weights.shape != (len(self.states),):
            raise ValueError("one weight per particle required")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, POS]

    @property
    def velocities(self) -> np.ndarray:
        return self.states[:, VEL]

    @classmethod
    def uniform(cls, states, rng_seed=None) -> "ParticleSet":
        states = np.asarray(states, dtype=float)
        n = len(states)
        return cls(states, np.full(n, 1.0 / n), rng_seed, True)


@dataclass(frozen=True)
class ProcessNoiseConfig:
    sigma: float = 0.4  # m/s^2

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")


@dataclass(frozen=True)
class MeasurementNoiseConfig:
    covariance: tuple = ((2.0, 0.0), (0.0, 1.5))  # (dB^2, Hz^2)

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise ValueError("covariance must be a symmetric 2x2 matrix")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("covariance must be positive definite")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.covariance, dtype=float)


@dataclass(frozen=True)
class InitConfig:
    """Particle initialisation around the link that triggered tracking.

    ``velocity_merge`` selects what survives the initial update pass:
    ``"particles"`` keeps the resampled particles, ``"mean"`` keeps the
    sampled positions and gives every particle the estimated mean velocity,
    ``"hybrid"`` keeps the sampled positions and pairs them with the
    resampled velocities in random order.
    """

    speed_max: float = 2.0
    heading_spread: float = math.pi / 4
    perp_std: float = 0.3
    velocity_merge: str = "mean"

    def __post_init__(self):
        if self.speed_max < 0 or self.heading_spread < 0 or self.perp_std < 0:
            raise ValueError("init spreads must be non-negative")
        if self.velocity_merge not in ("particles", "mean", "hybrid"):
            raise ValueError(f"unknown velocity_merge {self.velocity_merge!r}")


@dataclass(frozen=True)
class Region:
    """Axis-aligned box the person can occupy; particles outside get zero
    likelihood. Unbounded sides are infinite."""

    x_min: float = -math.inf
    x_max: float = math.inf
    y_min: float = -math.inf
    y_max: float = math.inf

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("region bounds must satisfy min < max")

    @classmethod
    def corridor(cls, links: Sequence[Link], margin: float = 0.2) -> "Region":
        """Strip between the lowest and highest node, shrunk by ``margin``,
        unbounded along the corridor."""
        ys = [c for link in links for c in (link.p_tx[1], link.p_rx[1])]
        return cls(y_min=min(ys) + margin, y_max=max(ys) - margin)

    def contains(self, states) -> np.ndarray:
        x = np.asarray(states, dtype=float)
        px, py = x[..., 0], x[..., 2]
        return (px >= self.x_min) & (px <= self.x_max) & (py >= self.y_min) & (py <= self.y_max)


@dataclass
class TrackerConfig:
    n_particles: int = 512
    process: ProcessNoiseConfig = field(default_factory=ProcessNoiseConfig)
    measurement: MeasurementNoiseConfig = field(default_factory=MeasurementNoiseConfig)
    init: InitConfig = field(default_factory=InitConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    reflection: ReflectionParams = field(default_factory=ReflectionParams)
    ellipse: EllipseParams = field(default_factory=EllipseParams)
    hmm: HmmConfig = field(default_factory=HmmConfig)
    use_freq: bool = True
    region: Region | None = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")

    @property
    def sample_interval(self) -> float:
        return self.spectral.sample_interval


# -- filter steps ---------------------------------------------------------


def transition_matrices(T_s: float) -> tuple[np.ndarray, np.ndarray]:
    A = np.array([[1, T_s, 0, 0], [0, 1, 0, 0], [0, 0, 1, T_s], [0, 0, 0, 1]], dtype=float)
    B = np.array([[0.5 * T_s**2, 0], [T_s, 0], [0, 0.5 * T_s**2], [0, T_s]], dtype=float)
    return A, B


def predict(ps: ParticleSet, T_s: float, noise: ProcessNoiseConfig, rng: np.random.Generator) -> ParticleSet:
    """Advance every particle through the constant-velocity model with an
    independent acceleration draw."""
    u = rng.normal(0.0, noise.sigma, size=(len(ps), 2))
    x = ps.states
    out = np.empty_like(x)
    out[:, 0] = x[:, 0] + T_s * x[:, 1] + 0.5 * T_s**2 * u[:, 0]
    out[:, 1] = x[:, 1] + T_s * u[:, 0]
    out[:, 2] = x[:, 2] + T_s * x[:, 3] + 0.5 * T_s**2 * u[:, 1]
    out[:, 3] = x[:, 3] + T_s * u[:, 1]
    return replace(ps, states=out)


def predict_measurements(
    states,
    link: Link,
    link_state,
    refl: ReflectionParams,
    ell: EllipseParams,
    spectral: SpectralConfig,
):
    """Predicted (g, |G|, G_valid) for each particle on one link.

    Particles at a link endpoint get NaN for ``g`` and an invalid ``G``.
    """
    x = np.atleast_2d(np.asarray(states, dtype=float))
    p, v = x[:, POS], x[:, VEL]
    n = len(x)
    state = PropagationState(link_state)
    G = np.zeros(n)
    G_valid = np.zeros(n, dtype=bool)
    if state is PropagationState.NON_FADING:
        return np.zeros(n), G, G_valid
    if state is PropagationState.REFLECTION:
        delta = excess_path_length(p, link, check=False)
        on_end = _at_endpoint(p, link)
        g = np.where(on_end, np.nan, reflection_gain_from_excess(delta, link.wavelength, refl))
        G = np.abs(np.asarray(model_frequency_avg(p, v, link, spectral, check=False)))
        G_valid = np.isfinite(G)
        G = np.where(G_valid, G, 0.0)
        return np.atleast_1d(g), G, G_valid
    along, perp = to_link_local(p, link)
    theta = ellipse_rotation(np.arctan2(v[:, 1], v[:, 0]), link)
    loss = shadow_loss_from_offset(perp, ell, theta)
    on_segment = (along >= 0.0) & (along <= link.length)
    return -np.where(on_segment, loss, 0.0), G, G_valid


def _at_endpoint(p: np.ndarray, link: Link) -> np.ndarray:
    d_rx = np.hypot(p[:, 0] - link.p_rx.x, p[:, 1] - link.p_rx.y)
    d_tx = np.hypot(p[:, 0] - link.p_tx.x, p[:, 1] - link.p_tx.y)
    return (d_rx <= ENDPOINT_TOL) | (d_tx <= ENDPOINT_TOL)


def predict_measurement(x: KinematicState, link: Link, link_state, refl, ell, spectral) -> tuple[float, float, bool]:
    """Single-state version of :func:`predict_measurements`."""
    g, G, ok = predict_measurements(np.asarray(x, dtype=float)[None, :], link, link_state, refl, ell, spectral)
    return float(g[0]), float(G[0]), bool(ok[0])


def residual_density(residual, cov) -> np.ndarray:
    """Zero-mean bivariate normal density of residual rows."""
    cov = np.asarray(cov, dtype=float)
    nu = np.atleast_2d(np.asarray(residual, dtype=float))
    q = np.einsum("ni,ij,nj->n", nu, np.linalg.inv(cov), nu)
    return np.exp(-0.5 * q) / (2.0 * np.pi * np.sqrt(np.linalg.det(cov)))


def link_log_likelihood(r, R, R_valid, g, G, G_valid, cov, use_freq: bool = True) -> np.ndarray:
    """Per-particle log-density of one link's measurement.

    Falls back to the time-domain marginal where the frequency term is
    unavailable. A missing combined RSS (NaN) contributes nothing.
    """
    g = np.asarray(g, dtype=float)
    if r is None or not np.isfinite(r):
        return np.zeros(g.shape)
    cov = np.asarray(cov, dtype=float)
    s_r = cov[0, 0]
    nu_r = r - g
    # 1-D marginal of the time-domain residual
    ll = -0.5 * nu_r**2 / s_r - 0.5 * math.log(2.0 * math.pi * s_r)
    if use_freq and R_valid:
        both = np.asarray(G_valid, dtype=bool)
        if both.any():
            det = np.linalg.det(cov)
            inv = np.linalg.inv(cov)
            nu_f = abs(R) - np.asarray(G, dtype=float)
            q = inv[0, 0] * nu_r**2 + 2.0 * inv[0, 1] * nu_r * nu_f + inv[1, 1] * nu_f**2
            ll2 = -0.5 * q - math.log(2.0 * math.pi) - 0.5 * math.log(det)
            ll = np.where(both, ll2, ll)
    return np.where(np.isnan(ll), -np.inf, ll)


def update_weights(
    ps: ParticleSet,
    measurements: Sequence[tuple[float, float, bool]],
    predictions: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    noise: MeasurementNoiseConfig,
    use_freq: bool = True,
) -> ParticleSet:
    """Multiply weights by the product over links of the residual densities.

    ``measurements`` holds ``(r, R, R_valid)`` per link and ``predictions``
    the matching ``(g, G, G_valid)`` arrays. The product is formed in the
    log domain and rescaled by its maximum only when the direct product
    would underflow, which leaves normalised weights unchanged.
    """
    if len(measurements) != len(predictions):
        raise ValueError("one prediction per link measurement required")
    ll = np.zeros(len(ps))
    for (r, R, R_valid), (g, G, G_valid) in zip(measurements, predictions):
        ll += link_log_likelihood(r, R, R_valid, g, G, G_valid, noise.matrix, use_freq)
    with np.errstate(divide="ignore"):
        log_w = np.log(ps.weights) + ll
    w = np.exp(log_w)
    if not np.any(w > 0) and np.any(np.isfinite(log_w)):
        w = np.exp(log_w - np.max(log_w[np.isfinite(log_w)]))
    return replace(ps, weights=w, normalized=False)


def normalize(ps: ParticleSet) -> ParticleSet:
    total = ps.weights.sum()
    if not total > 0 or not np.isfinite(total):
        raise DegenerateWeightsError("weights sum to zero")
    return replace(ps, weights=ps.weights / total, normalized=True)


def systematic_indices(weights, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    n = len(w)
    cum = np.cumsum(w)
    cum /= cum[-1]
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cum, u, side="right"), n - 1)


def resample(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Systematic resampling to equal weights."""
    idx = systematic_indices(ps.weights, rng)
    n = len(ps)
    return replace(ps, states=ps.states[idx], weights=np.full(n, 1.0 / n), normalized=True)


def estimate(ps: ParticleSet) -> KinematicState:
    """Mean of the particles (equally weighted after resampling)."""
    return KinematicState(*np.mean(ps.states, axis=0))


def sample_initial_particles(
    link: Link, heading_hint: float, n: int, init: InitConfig, rng: np.random.Generator, seed=None
) -> ParticleSet:
    """Positions along the LoS of ``link`` with a Gaussian perpendicular
    spread; speeds and headings uniform around the hint."""
    along = rng.uniform(0.0, link.length, n)
    perp = rng.normal(0.0, init.perp_std, n) if init.perp_std > 0 else np.zeros(n)
    p = np.asarray(link.p_tx) + along[:, None] * link.direction + perp[:, None] * link.normal
    speed = rng.uniform(0.0, init.speed_max, n)
    heading = rng.uniform(heading_hint - init.heading_spread, heading_hint + init.heading_spread, n)
    states = np.column_stack([p[:, 0], speed * np.cos(heading), p[:, 1], speed * np.sin(heading)])
    return ParticleSet.uniform(states, seed)


class StepUpdate(NamedTuple):
    particles: ParticleSet
    estimate: KinematicState
    degenerate: bool


def filter_update(
    ps: ParticleSet,
    links: Sequence[Link],
    link_states: Sequence,
    measurements: Sequence[tuple[float, float, bool]],
    cfg: TrackerConfig,
    rng: np.random.Generator,
) -> StepUpdate:
    """Measurement update, normalisation, resampling and estimation.

    When every weight vanishes, weights are reset to uniform and the step is
    flagged degenerate instead of raising.
    """
    preds = [
        predict_measurements(ps.states, link, s, cfg.reflection, cfg.ellipse, cfg.spectral)
        for link, s in zip(links, link_states)
    ]
    ps = update_weights(ps, measurements, preds, cfg.measurement, cfg.use_freq)
    if cfg.region is not None:
        ps = replace(ps, weights=np.where(cfg.region.contains(ps.states), ps.weights, 0.0))
    degenerate = False
    try:
        ps = normalize(ps)
    except DegenerateWeightsError:
        degenerate = True
        ps = ParticleSet.uniform(ps.states, ps.rng_seed)
    ps = resample(ps, rng)
    return StepUpdate(ps, estimate(ps), degenerate)


def initialize(
    trigger_link: Link,
    heading_hint: float,
    cfg: TrackerConfig,
    rng: np.random.Generator,
    links: Sequence[Link] | None = None,
    link_states: Sequence | None = None,
    measurements: Sequence[tuple[float, float, bool]] | None = None,
) -> StepUpdate:
    """Sample an initial particle set and run one update pass on the first
    measurement to settle the velocity."""
    ps = sample_initial_particles(trigger_link, heading_hint, cfg.n_particles, cfg.init, rng)
    if measurements is None:
        return StepUpdate(ps, estimate(ps), False)
    sampled = ps.states.copy()
    upd = filter_update(ps, links, link_states, measurements, cfg, rng)
    if cfg.init.velocity_merge == "particles":
        return upd
    merged = sampled
    if cfg.init.velocity_merge == "mean":
        merged[:, 1] = upd.estimate.vx
        merged[:, 3] = upd.estimate.vy
    else:
        merged[:, VEL] = upd.particles.velocities[rng.permutation(len(merged))]
    ps = ParticleSet.uniform(merged)
    return StepUpdate(ps, estimate(ps), upd.degenerate)


# -- lifecycle --------------------------------------------------------------


@dataclass
class ControllerOutput:
    estimate: KinematicState | None
    event: GateEvent | None
    link_states: list[PropagationState]


class Tracker:
    """HMM-gated particle filter over a fixed set of links.

    Call :meth:`step` once per sample with the per-link measurements
    ``(r, R, R_valid)``.
    """

    def __init__(
        self,
        links: Sequence[Link],
        cfg: TrackerConfig | None = None,
        seed: int | None = None,
        heading_hint: float = 0.0,
    ):
        self.links = list(links)
        self.cfg = cfg or TrackerConfig()
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.heading_hint = heading_hint
        self.hmms = [LinkStateHmm(self.cfg.hmm) for _ in self.links]
        self.particles: ParticleSet | None = None
        self.degenerate_count = 0

    @property
    def running(self) -> bool:
        return self.particles is not None

    def step(self, measurements: Sequence[tuple[float, float, bool]]) -> ControllerOutput:
        estimates = [hmm.step(r if np.isfinite(r) else 0.0) for hmm, (r, _, _) in zip(self.hmms, measurements)]
        return self.controller_step(measurements, estimates)

    def controller_step(
        self,
        measurements: Sequence[tuple[float, float, bool]],
        link_estimates: Sequence[LinkStateEstimate],
    ) -> ControllerOutput:
        states = [e.state for e in link_estimates]
        event = gate_events(states, self.running)
        if event is GateEvent.STOP:
            self.particles = None
            return ControllerOutput(None, event, states)
        if self.running:
            ps = predict(self.particles, self.cfg.sample_interval, self.cfg.process, self.rng)
            upd = filter_update(ps, self.links, states, measurements, self.cfg, self.rng)
        elif event is GateEvent.START:
            shadowed = [
                i for i, s in enumerate(states) if s is PropagationState.SHADOWING
            ]
            trigger = max(shadowed, key=lambda i: link_estimates[i].posterior[2])
            upd = initialize(
                self.links[trigger], self.heading_hint, self.cfg, self.rng, self.links, states, measurements
            )
        else:
            return ControllerOutput(None, None, states)
        self.particles = upd.particles
        self.degenerate_count += int(upd.degenerate)
        return ControllerOutput(upd.estimate, event, states)


@dataclass
class TrackResult:
    """Output of running the controller over a measurement stream.

    ``estimates`` rows are ``[px, vx, py, vy]`` for the steps listed in
    ``k``; ``particles`` holds the matching (N, 2) position snapshots when
    requested.
    """

    t: np.ndarray
    k: np.ndarray
    estimates: np.ndarray
    events: dict[int, GateEvent]
    link_states: np.ndarray
    particles: list[np.ndarray] | None
    degenerate_count: int = 0


def track(
    measurements,
    links: Sequence[Link],
    cfg: TrackerConfig | None = None,
    seed: int | None = None,
    heading_hint: float = 0.0,
    keep_particles: bool = False,
) -> TrackResult:
    """Run the gated filter over replayed measurement arrays
    (see :func:`rssdfl.simulator.replay_arrays`)."""
    tracker = Tracker(links, cfg, seed, heading_hint)
    r, R, ok = measurements.r, measurements.freq, measurements.freq_valid
    L, K = r.shape
    ks, est, parts = [], [], []
    events: dict[int, GateEvent] = {}
    states = np.ones((L, K), dtype=int)
    for k in range(K):
        out = tracker.step([(r[i, k], R[i, k], bool(ok[i, k])) for i in range(L)])
        states[:, k] = [int(s) for s in out.link_states]
        if out.event is not None:
            events[k] = out.event
        if out.estimate is not None:
            ks.append(k)
            est.append(out.estimate)
            if keep_particles:
                parts.append(tracker.particles.positions.copy())
    return TrackResult(
        np.asarray(measurements.t, dtype=float),
        np.asarray(ks, dtype=int),
        np.asarray(est, dtype=float).reshape(-1, 4),
        events,
        states,
        parts if keep_particles else None,
        tracker.degenerate_count,
    )
