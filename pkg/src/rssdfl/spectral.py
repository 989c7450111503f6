"""Frequency-domain measurement and model of the channel change rate.

The measured change rate is the peak of the zero-padded periodogram of a
short RSS window; the modelled one is the excess-path-length rate divided by
the wavelength.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Link, excess_path_length, path_length_rate
from .rss_model import ReflectionParams, reflection_gain_from_excess

LOG10_E = 10.0 * np.log10(np.e)

# Floor for log-power of empty bins.
_POWER_FLOOR = 1e-300


@dataclass(frozen=True)
class SpectralConfig:
    window_len: int = 20
    sample_interval: float = 0.032
    dft_len: int = 256
    min_freq: float = 0.5
    snr_gate: float = 6.0  # dB above the median in-band bin power
    taper: str = "rect"  # "rect" or "hann"
    interpolate: bool = True

    def __post_init__(self):
        if self.window_len < 4:
            raise ValueError("window_len must be at least 4")
        if self.dft_len < self.window_len:
            raise ValueError("dft_len must be >= window_len")
        if not 0.0 <= self.min_freq < self.nyquist:
            raise ValueError("min_freq must lie in [0, Nyquist)")
        if self.taper not in ("rect", "hann"):
            raise ValueError(f"unknown taper {self.taper!r}")

    @property
    def nyquist(self) -> float:
        return 0.5 / self.sample_interval

    @property
    def bin_width(self) -> float:
        return 1.0 / (self.dft_len * self.sample_interval)


@dataclass(frozen=True)
class FrequencyMeasurement:
    freq: float
    valid: bool
    peak_power: float  # dB


def psd_peaks(windows, cfg: SpectralConfig):
    """Vectorised peak picking over windows stacked on axis 0.

    Returns ``(freq, valid, peak_power_db)`` arrays of length ``len(windows)``.
    """
    x = np.atleast_2d(np.asarray(windows, dtype=float))
    if x.shape[1] != cfg.window_len:
        raise ValueError(f"window length {x.shape[1]} != {cfg.window_len}")
    flat = np.ptp(x, axis=1) <= 1e-9
    x = x - x.mean(axis=1, keepdims=True)
    x[flat] = 0.0
    if cfg.taper == "hann":
        x = x * np.hanning(cfg.window_len)
    power = np.abs(np.fft.rfft(x, n=cfg.dft_len, axis=1)) ** 2
    freqs = np.fft.rfftfreq(cfg.dft_len, cfg.sample_interval)
    band = np.flatnonzero(freqs >= cfg.min_freq)
    log_p = np.log(np.maximum(power, _POWER_FLOOR))

    rows = np.arange(x.shape[0])
    m = band[np.argmax(power[:, band], axis=1)]
    peak = power[rows, m]
    freq = freqs[m]
    if cfg.interpolate:
        inner = (m > 0) & (m < len(freqs) - 1)
        lo = log_p[rows, np.maximum(m - 1, 0)]
        mid = log_p[rows, m]
        hi = log_p[rows, np.minimum(m + 1, len(freqs) - 1)]
        den = lo - 2.0 * mid + hi
        ok = inner & (den < 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            shift = np.where(ok, 0.5 * (lo - hi) / den, 0.0)
        freq = freq + np.clip(shift, -0.5, 0.5) * cfg.bin_width

    peak_db = 10.0 * np.log10(np.maximum(peak, _POWER_FLOOR))
    median_db = 10.0 * np.log10(np.maximum(np.median(power[:, band], axis=1), _POWER_FLOOR))
    valid = (peak > 0) & (peak_db - median_db >= cfg.snr_gate)
    freq = np.clip(freq, 0.0, cfg.nyquist)
    return freq, valid, np.where(peak > 0, peak_db, -np.inf)


def psd_peak(window, cfg: SpectralConfig) -> FrequencyMeasurement:
    """Frequency [Hz, >= 0] of the periodogram peak of one window."""
    freq, valid, peak_db = psd_peaks(np.asarray(window, dtype=float)[None, :], cfg)
    return FrequencyMeasurement(float(freq[0]), bool(valid[0]), float(peak_db[0]))


def model_frequency(p, v, link: Link, *, check: bool = True):
    """Dominant RSS frequency [Hz, signed] for a reflector at ``p`` moving with ``v``."""
    rate = path_length_rate(p, v, link, check=check)
    return rate / link.wavelength


def window_centre(p, v, cfg: SpectralConfig) -> np.ndarray:
    """Position half a window back along a constant-velocity path."""
    back = 0.5 * cfg.window_len * cfg.sample_interval
    return np.asarray(p, dtype=float) - back * np.asarray(v, dtype=float)


def model_frequency_avg(p, v, link: Link, cfg: SpectralConfig, *, check: bool = True):
    """Model frequency at the average position over the measurement window."""
    return model_frequency(window_centre(p, v, cfg), v, link, check=check)


def fourier_series_gain(delta, refl: ReflectionParams, n_terms: int = 200, wavelength: float = 1.0):
    """Truncated cosine-series form of the reflection gain [dB].

    ``delta`` is the excess path length in the units of ``wavelength``.
    """
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    i = np.arange(1, n_terms + 1)
    a = (-refl.psi) ** i / i
    phase = 2.0 * np.pi * np.asarray(delta, dtype=float)[..., None] / wavelength
    out = -2.0 * LOG10_E * np.sum(a * np.cos(i * phase), axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class SpectrumCheckReport:
    """Per-window comparison of measured and modelled frequency.

    ``k`` is the index of the last sample of each window.
    """

    k: np.ndarray
    measured: np.ndarray
    modelled: np.ndarray
    valid: np.ndarray
    in_reflection: np.ndarray
    bin_width: float

    @property
    def error(self) -> np.ndarray:
        return np.abs(self.measured - np.abs(self.modelled))

    @property
    def scored(self) -> np.ndarray:
        return self.valid & self.in_reflection

    def fraction_within(self, n_bins: float = 2.0) -> float:
        e = self.error[self.scored]
        return float(np.mean(e <= n_bins * self.bin_width)) if e.size else float("nan")

    def median_error(self) -> float:
        e = self.error[self.scored]
        return float(np.median(e)) if e.size else float("nan")


def first_order_spectrum_check(
    positions,
    velocities,
    link: Link,
    refl: ReflectionParams,
    cfg: SpectralConfig,
    in_reflection=None,
) -> SpectrumCheckReport:
    """Synthesize noiseless reflection gain along a trajectory and compare the
    windowed PSD peak with the window-averaged model frequency.

    ``in_reflection`` optionally marks which samples are in the reflection
    state; windows touching any other sample are excluded from scoring.
    """
    positions = np.asarray(positions, dtype=float)
    velocities = np.asarray(velocities, dtype=float)
    n = cfg.window_len
    K = len(positions)
    if K < n:
        empty = np.array([], dtype=float)
        return SpectrumCheckReport(
            np.array([], dtype=int), empty, empty, empty.astype(bool), empty.astype(bool), cfg.bin_width
        )
    g = reflection_gain_from_excess(excess_path_length(positions, link), link.wavelength, refl)
    windows = np.lib.stride_tricks.sliding_window_view(np.asarray(g), n)
    k = np.arange(n - 1, K)
    freq, valid, _ = psd_peaks(windows, cfg)
    modelled = model_frequency_avg(positions[k], velocities[k], link, cfg)
    if in_reflection is None:
        ok = np.ones(len(k), dtype=bool)
    else:
        mask = np.asarray(in_reflection, dtype=bool)
        ok = np.lib.stride_tricks.sliding_window_view(mask, n).all(axis=1)
    return SpectrumCheckReport(k, freq, np.asarray(modelled), valid, ok, cfg.bin_width)
