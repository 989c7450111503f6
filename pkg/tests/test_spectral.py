import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rssdfl.geometry import Link
from rssdfl.rss_model import EllipseParams, PropagationState, true_state
from rssdfl.rss_model import ReflectionParams, reflection_gain_from_excess
from rssdfl.spectral import (
    SpectralConfig,
    first_order_spectrum_check,
    fourier_series_gain,
    model_frequency,
    model_frequency_avg,
    psd_peak,
    psd_peaks,
    window_centre,
)

CFG = SpectralConfig()
LINK4 = Link("l", (0.0, 0.0), (4.0, 0.0), 2.4e9)


def tone(f, amp=1.0, phase=0.3, cfg=CFG):
    k = np.arange(cfg.window_len)
    return amp * np.cos(2 * np.pi * f * k * cfg.sample_interval + phase)


def dtft_argmax(x, cfg=CFG, n=200_001):
    """Frequency of the largest in-band value of the mean-removed DTFT."""
    x = np.asarray(x) - np.mean(x)
    f = np.linspace(cfg.min_freq, cfg.nyquist, n)
    k = np.arange(len(x))
    power = np.abs(np.exp(-2j * np.pi * np.outer(f, k) * cfg.sample_interval) @ x) ** 2
    return f[np.argmax(power)]


class TestConfig:
    def test_bin_width(self):
        assert CFG.bin_width == pytest.approx(1 / (256 * 0.032))
        assert CFG.bin_width == pytest.approx(0.122, abs=1e-3)

    @pytest.mark.parametrize(
        "kwargs", [dict(window_len=3), dict(dft_len=10), dict(min_freq=20.0), dict(taper="kaiser")]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SpectralConfig(**kwargs)


class TestPsdPeak:
    def test_pure_tone_within_one_bin(self):
        m = psd_peak(tone(5.0), CFG)
        assert m.valid
        assert abs(m.freq - 5.0) <= CFG.bin_width

    @pytest.mark.parametrize("f", [1.7, 3.0, 5.0, 8.2, 12.5])
    @pytest.mark.parametrize("phase", [0.0, 0.3, 1.9])
    def test_matches_dense_dtft_argmax(self, f, phase):
        # with only 20 samples, leakage can pull the peak off the tone itself;
        # the estimator should still find the maximum of the windowed spectrum
        x = tone(f, phase=phase)
        m = psd_peak(x, CFG)
        assert abs(m.freq - dtft_argmax(x)) <= 0.25 * CFG.bin_width

    def test_constant_window_invalid(self):
        m = psd_peak(np.full(20, -3.0), CFG)
        assert not m.valid

    def test_two_tones_dominant_wins(self):
        x = tone(5.0, 2.0) + tone(10.0, 1.0, phase=1.1)
        m = psd_peak(x, CFG)
        assert abs(m.freq - 5.0) <= CFG.bin_width

    def test_gate_rejects_noise_more_than_tones(self):
        rng = np.random.default_rng(0)
        _, noise_valid, _ = psd_peaks(rng.normal(size=(2000, 20)), CFG)
        tones = np.stack([tone(f, phase=ph) for f, ph in rng.uniform((1.5, 0), (14, 6.28), (2000, 2))])
        _, tone_valid, _ = psd_peaks(tones + 0.05 * rng.normal(size=tones.shape), CFG)
        assert tone_valid.mean() > 0.99
        assert noise_valid.mean() < tone_valid.mean() - 0.2

    def test_length_checked(self):
        with pytest.raises(ValueError):
            psd_peak(np.zeros(19), CFG)

    @settings(max_examples=200)
    @given(st.floats(1.0, 14.0), st.floats(-60, 60), st.floats(0.01, 100.0))
    def test_offset_and_scale_invariance(self, f, offset, scale):
        x = tone(f)
        base = psd_peak(x, CFG)
        shifted = psd_peak(x + offset, CFG)
        scaled = psd_peak(scale * x, CFG)
        assert shifted.freq == pytest.approx(base.freq, abs=1e-6)
        assert scaled.freq == pytest.approx(base.freq, abs=1e-6)
        assert shifted.valid == base.valid == scaled.valid

    def test_hann_option(self):
        m = psd_peak(tone(6.0), SpectralConfig(taper="hann"))
        assert abs(m.freq - 6.0) <= CFG.bin_width

    def test_frequency_bounded_by_nyquist(self):
        rng = np.random.default_rng(1)
        f, _, _ = psd_peaks(rng.normal(size=(500, 20)), CFG)
        assert np.all((f >= 0) & (f <= CFG.nyquist))


class TestModelFrequency:
    def test_worked_example(self):
        g = model_frequency((2, 1.5), (0, -0.5), LINK4)
        assert g == pytest.approx(-0.6 / LINK4.wavelength)
        assert g == pytest.approx(-4.803, abs=1e-3)

    def test_zero_velocity(self):
        assert model_frequency((1, 1), (0, 0), LINK4) == 0.0
        assert model_frequency_avg((1, 1), (0, 0), LINK4, CFG) == model_frequency((1, 1), (0, 0), LINK4)

    def test_window_centre_is_half_window_back(self):
        v = np.array([0.5, 0.1])
        p = np.array([1.0, 1.0])
        c = window_centre(p, v, CFG)
        assert np.allclose(c, p - v * 10 * 0.032)
        assert model_frequency_avg(p, v, LINK4, CFG) == pytest.approx(model_frequency(c, v, LINK4))

    @settings(max_examples=200)
    @given(
        st.tuples(st.floats(-3, 7), st.floats(0.05, 3)),
        st.tuples(st.floats(-2, 2), st.floats(-2, 2)),
    )
    def test_bound_and_sign(self, p, v):
        g = model_frequency_avg(p, v, LINK4, CFG, check=False)
        if not np.isfinite(g):
            return
        assert abs(g) <= 2 * math.hypot(*v) / LINK4.wavelength + 1e-9
        assert model_frequency(p, np.negative(v), LINK4) == pytest.approx(-model_frequency(p, v, LINK4))

    def test_walker_near_los_is_slow(self):
        # 0.5 m/s walker crossing a 3 m link, 0.5 m off the LoS
        link = Link("c", (0.0, 0.0), (0.0, 3.0))
        g = model_frequency((-0.5, 1.5), (0.5, 0.0), link)
        assert abs(g) <= 6.0


class TestFourierSeries:
    def test_matches_closed_form(self):
        phase = np.linspace(0, 1, 1000, endpoint=False)
        for psi in (0.1, 0.5, 0.9):
            refl = ReflectionParams(psi)
            series = fourier_series_gain(phase, refl, 200)
            closed = reflection_gain_from_excess(phase, 1.0, refl)
            assert np.max(np.abs(series - closed)) < 0.05

    def test_log_series_identity_at_zero(self):
        refl = ReflectionParams(0.3)
        assert fourier_series_gain(0.0, refl, 200) == pytest.approx(20 * math.log10(1.3), abs=1e-9)

    def test_small_psi(self):
        assert abs(fourier_series_gain(0.37, ReflectionParams(1e-9), 10)) < 1e-7

    def test_n_terms_checked(self):
        with pytest.raises(ValueError):
            fourier_series_gain(0.0, ReflectionParams(), 0)


class TestSpectrumCheck:
    link = Link("c", (0.0, 0.0), (0.0, 3.0))
    refl = ReflectionParams(0.4)

    def walk(self, heading, speed=0.5, n=200, start=(-2.4, 1.5)):
        v = speed * np.array([math.cos(heading), math.sin(heading)])
        p = np.asarray(start) + np.arange(n)[:, None] * CFG.sample_interval * v
        return p, np.tile(v, (n, 1))

    def test_first_order_agreement_in_reflection_state(self):
        p, v = self.walk(0.0)
        in_refl = np.array([true_state(q, self.link, EllipseParams()) is PropagationState.REFLECTION for q in p])
        rep = first_order_spectrum_check(p, v, self.link, self.refl, CFG, in_reflection=in_refl)
        assert rep.scored.sum() >= 50
        assert rep.fraction_within(2.0) >= 0.9
        assert rep.median_error() < CFG.bin_width

    def test_stationary_person_invalid(self):
        p, v = self.walk(0.0, speed=0.0)
        rep = first_order_spectrum_check(p, v, self.link, self.refl, CFG)
        assert not rep.valid.any()

    def test_short_input(self):
        p, v = self.walk(0.0, n=5)
        assert len(first_order_spectrum_check(p, v, self.link, self.refl, CFG).k) == 0
