"""Forward models of the time-domain RSS.

Per-channel raw RSS, mean removal and channel combining, and the
three-state gain (non-fading, reflection, shadowing) of a person at ``p``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geometry import Link, excess_path_length, to_link_local



class PropagationState(enum.IntEnum):
    NON_FADING = 1
    REFLECTION = 2
    SHADOWING = 3


@dataclass(frozen=True)
class ChannelParams:
    channel_id: int
    system_gain: float = -50.0  # dB
    noise_std: float = 1.0  # dB

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class ReflectionParams:
    psi: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.psi < 1.0:
            raise ValueError(f"psi must lie in (0, 1), got {self.psi}")


@dataclass(frozen=True)
class EllipseParams:
    """Person cross-section: semi-axes, attenuation and rotation.

    ``theta`` is the angle between the semi-minor (``A``) axis and the link
    normal; ``theta = 0`` puts the semi-major axis along the LoS.
    """

    A: float = 0.15
    B: float = 0.25
    rho: float = 25.0  # dB/m
    theta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.A <= self.B:
            raise ValueError("ellipse axes must satisfy 0 < A <= B")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")


def ellipse_rotation(heading, link: Link):
    """Rotation of a heading-aligned person (semi-minor axis along the
    direction of travel) relative to ``link``."""
    return np.asarray(heading) - (link.angle + 0.5 * np.pi)


def projected_half_width(A: float, B: float, theta) -> np.ndarray:
    """Half-width a(theta) of the ellipse measured across the LoS."""
    return np.sqrt(A**2 * np.cos(theta) ** 2 + B**2 * np.sin(theta) ** 2)


def raw_rss(g, ch: ChannelParams, rng: np.random.Generator):
    """One noisy per-channel RSS sample: P(c) + g + noise."""
    g = np.asarray(g, dtype=float)
    noise = rng.normal(0.0, ch.noise_std, size=g.shape) if ch.noise_std > 0 else 0.0
    out = ch.system_gain + g + noise
    return float(out) if out.ndim == 0 else out


def calibration_means(samples) -> np.ndarray:
    """Per-channel means of an empty-room window, shape (T, C) -> (C,)."""
    return np.nanmean(np.asarray(samples, dtype=float), axis=0)


def mean_remove_and_combine(samples, calibration_means):
    """Average over channels of the calibration-mean-removed RSS.

    ``samples`` has channels on its last axis. Missing channels (NaN) are left
    out of the average; a sample with no channel at all yields NaN.
    """
    samples = np.asarray(samples, dtype=float)
    means = np.asarray(calibration_means, dtype=float)
    if samples.shape[-1] != means.shape[-1]:
        raise ValueError(
            f"channel count mismatch: {samples.shape[-1]} samples vs {means.shape[-1]} means"
        )
    dev = samples - means
    n = np.sum(~np.isnan(dev), axis=-1)
    with np.errstate(invalid="ignore"):
        out = np.where(n > 0, np.nansum(dev, axis=-1) / np.maximum(n, 1), np.nan)
    return float(out) if out.ndim == 0 else out


def reflection_gain_from_excess(delta, wavelength: float, refl: ReflectionParams):
    phase = 2.0 * np.pi * np.asarray(delta, dtype=float) / wavelength
    psi = refl.psi
    out = 10.0 * np.log10(psi**2 + 2.0 * psi * np.cos(phase) + 1.0)
    return float(out) if out.ndim == 0 else out


def reflection_gain(p, link: Link, refl: ReflectionParams):
    """Single-bounce interference gain [dB] of a reflector at ``p``."""
    return reflection_gain_from_excess(excess_path_length(p, link), link.wavelength, refl)


def shadow_loss_from_offset(d, ell: EllipseParams, theta=None):
    """Attenuation magnitude [dB] of a ray passing at offset ``d`` from the
    ellipse centre. ``theta`` overrides ``ell.theta`` (may be an array)."""
    theta = ell.theta if theta is None else theta
    a = projected_half_width(ell.A, ell.B, theta)
    d = np.asarray(d, dtype=float)
    inside = np.abs(d) <= a
    chord = np.sqrt(np.clip(a**2 - d**2, 0.0, None))
    out = np.where(inside, 2.0 * ell.rho * ell.A * ell.B / a**2 * chord, 0.0)
    return float(out) if out.ndim == 0 else out


def shadow_gain(p, link: Link, ell: EllipseParams, theta=None):
    """Total attenuation [dB, >= 0] along the LoS line through a person at ``p``."""
    return shadow_loss_from_offset(to_link_local(p, link).perp, ell, theta)


def three_state_gain(state, p, link: Link, refl: ReflectionParams, ell: EllipseParams, theta=None):
    """Mean-removed RSS gain g [dB] for the given propagation state."""
    state = PropagationState(state)
    if state is PropagationState.NON_FADING:
        shape = np.shape(np.asarray(p, dtype=float))[:-1]
        return 0.0 if shape == () else np.zeros(shape)
    if state is PropagationState.REFLECTION:
        return reflection_gain(p, link, refl)
    return -shadow_gain(p, link, ell, theta)


def true_state(p, link: Link, ell: EllipseParams, theta=None, n_max: int = 12):
    """Propagation state implied by a person at ``p``.

    Shadowing when the ellipse footprint cuts the LoS segment, reflection
    within the first ``n_max`` Fresnel zones, non-fading otherwise.
    Returns an int array (or a PropagationState for a single point).
    """
    p = np.asarray(p, dtype=float)
    theta = ell.theta if theta is None else theta
    along, perp = to_link_local(p, link)
    a = projected_half_width(ell.A, ell.B, theta)
    shadow = (np.abs(perp) <= a) & (along >= 0.0) & (along <= link.length)
    delta = excess_path_length(p, link, check=False)
    reflect = delta < n_max * 0.5 * link.wavelength
    state = np.where(
        shadow,
        int(PropagationState.SHADOWING),
        np.where(reflect, int(PropagationState.REFLECTION), int(PropagationState.NON_FADING)),
    )
    return PropagationState(int(state)) if state.ndim == 0 else state
