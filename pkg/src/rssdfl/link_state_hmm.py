"""Causal three-state HMM over the combined RSS of one link, and the gating
rules that start and stop tracking."""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .rss_model import PropagationState

STATES = (PropagationState.NON_FADING, PropagationState.REFLECTION, PropagationState.SHADOWING)


def default_transition_matrix(stay: float = 0.98, forbidden: float = 1e-4) -> np.ndarray:
    """Sticky transitions; direct non-fading <-> shadowing jumps are nearly
    impossible since a person has to pass the reflection zone first."""
    A = np.empty((3, 3))
    A[0] = [stay, 1.0 - stay - forbidden, forbidden]
    A[1] = [(1.0 - stay) / 2, stay, (1.0 - stay) / 2]
    A[2] = [forbidden, 1.0 - stay - forbidden, stay]
    return A


def _default_emission_means() -> np.ndarray:
    # columns: windowed std [dB], windowed signed mean [dB]
    return np.array([[0.25, 0.0], [1.8, 0.0], [1.5, -6.0]])


def _default_emission_stds() -> np.ndarray:
    return np.array([[0.15, 0.3], [1.0, 1.5], [2.0, 3.5]])


@dataclass
class HmmConfig:
    """Transition matrix and per-state Gaussian emissions on the features
    (windowed std, windowed mean) of the combined RSS."""

    transition_matrix: np.ndarray = field(default_factory=default_transition_matrix)
    emission_means: np.ndarray = field(default_factory=_default_emission_means)
    emission_stds: np.ndarray = field(default_factory=_default_emission_stds)
    feature_window: int = 10

    def __post_init__(self):
        self.transition_matrix = np.asarray(self.transition_matrix, dtype=float)
        self.emission_means = np.asarray(self.emission_means, dtype=float)
        self.emission_stds = np.asarray(self.emission_stds, dtype=float)
        if self.transition_matrix.shape != (3, 3):
            raise ValueError("transition matrix must be 3x3")
        if np.any(self.transition_matrix < 0) or not np.allclose(self.transition_matrix.sum(axis=1), 1.0):
            raise ValueError("transition matrix rows must be probability vectors")
        if self.emission_means.shape != (3, 2) or self.emission_stds.shape != (3, 2):
            raise ValueError("emission parameters must be 3x2")
        if np.any(self.emission_stds <= 0):
            raise ValueError("emission stds must be positive")
        if self.feature_window < 2:
            raise ValueError("feature_window must be >= 2")

    @classmethod
    def for_noise(cls, combined_noise_std: float, **kwargs) -> "HmmConfig":
        """Defaults with the non-fading emission matched to a noise level."""
        means = _default_emission_means()
        stds = _default_emission_stds()
        s = max(combined_noise_std, 1e-3)
        means[0] = [s, 0.0]
        stds[0] = [0.35 * s + 0.05, 0.5 * s + 0.05]
        return cls(emission_means=means, emission_stds=stds, **kwargs)


@dataclass(frozen=True)
class LinkStateEstimate:
    state: PropagationState
    posterior: np.ndarray


def window_features(samples) -> np.ndarray:
    """(std, mean) of a window of combined RSS samples."""
    x = np.asarray(samples, dtype=float)
    x = x[~np.isnan(x)]
    if x.size < 2:
        return np.array([np.nan, np.nan])
    return np.array([x.std(ddof=1), x.mean()])


def emission_likelihood(feature, cfg: HmmConfig) -> np.ndarray:
    """Per-state likelihood of a feature vector; flat when undefined."""
    feature = np.asarray(feature, dtype=float)
    if np.any(np.isnan(feature)):
        return np.ones(3)
    z = (feature - cfg.emission_means) / cfg.emission_stds
    log_l = -0.5 * np.sum(z**2, axis=1) - np.sum(np.log(cfg.emission_stds), axis=1)
    return np.exp(log_l - log_l.max())


def hmm_step(feature, prior, cfg: HmmConfig) -> LinkStateEstimate:
    """One forward-filter step: predict through the transition matrix, then
    weight by the emission likelihood of ``feature``."""
    prior = np.asarray(prior, dtype=float)
    predicted = cfg.transition_matrix.T @ prior
    post = predicted * emission_likelihood(feature, cfg)
    total = post.sum()
    if not np.isfinite(total) or total <= 0:
        post = predicted
        total = post.sum()
    post = post / total
    return LinkStateEstimate(STATES[int(np.argmax(post))], post)


class LinkStateHmm:
    """Streaming state estimator for one link."""

    def __init__(self, cfg: HmmConfig | None = None, prior=None):
        self.cfg = cfg or HmmConfig()
        self.posterior = np.array([1.0, 0.0, 0.0]) if prior is None else np.asarray(prior, float)
        self._buf: deque[float] = deque(maxlen=self.cfg.feature_window)

    def step(self, r: float) -> LinkStateEstimate:
        self._buf.append(float(r))
        est = hmm_step(window_features(self._buf), self.posterior, self.cfg)
        self.posterior = est.posterior
        return est


class GateEvent(enum.Enum):
    START = "start"
    STOP = "stop"


def gate_events(states, running: bool) -> GateEvent | None:
    """Lifecycle rule: stop when every link is non-fading, start when any
    link is shadowed."""
    states = [PropagationState(s) for s in states]
    if running:
        if all(s is PropagationState.NON_FADING for s in states):
            return GateEvent.STOP
        return None
    if any(s is PropagationState.SHADOWING for s in states):
        return GateEvent.START
    return None
