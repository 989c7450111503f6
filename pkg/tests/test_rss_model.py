import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rssdfl.geometry import Link
from rssdfl.rss_model import (
    ChannelParams,
    EllipseParams,
    PropagationState,
    ReflectionParams,
    mean_remove_and_combine,
    projected_half_width,
    raw_rss,
    reflection_gain,
    reflection_gain_from_excess,
    shadow_gain,
    shadow_loss_from_offset,
    three_state_gain,
    true_state,
)

LAM = 0.125
LINK = Link("l", (0.0, 0.0), (4.0, 0.0))


def two_ray_db(delta, lam, psi):
    """Power of the phasor sum of a unit direct ray and a reflected ray."""
    return 20 * np.log10(np.abs(1 + psi * np.exp(1j * 2 * np.pi * np.asarray(delta) / lam)))


def chord_by_quadrature(d, A, B, theta, rho, n=200_001):
    """rho times the length of the line y = d inside the rotated ellipse."""
    # the line runs along x; the ellipse has semi-axis A rotated by theta from the y axis
    x = np.linspace(-2 * B - 1, 2 * B + 1, n)
    c, s = math.cos(theta), math.sin(theta)
    u = -x * s + d * c  # coordinate along the A axis
    w = x * c + d * s  # coordinate along the B axis
    inside = (u / A) ** 2 + (w / B) ** 2 <= 1
    return rho * inside.sum() * (x[1] - x[0])


class TestRawRss:
    def test_noiseless(self):
        rng = np.random.default_rng(0)
        assert raw_rss(3.0, ChannelParams(0, -50.0, 0.0), rng) == -47.0
        assert raw_rss(0.0, ChannelParams(0, -50.0, 0.0), rng) == -50.0

    def test_mean_of_draws(self):
        rng = np.random.default_rng(1)
        ch = ChannelParams(0, -50.0, 2.0)
        x = raw_rss(np.full(100_000, 1.5), ch, rng)
        assert abs(x.mean() - (-48.5)) < 3 * 2.0 / math.sqrt(100_000)

    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError):
            ChannelParams(0, -50.0, -1.0)


class TestCombine:
    def test_at_means_is_zero(self):
        means = np.array([-50.0, -51.0, -52.0])
        assert mean_remove_and_combine(means, means) == 0.0

    def test_cancellation(self):
        assert mean_remove_and_combine([2.0, -2.0], [0.0, 0.0]) == 0.0

    def test_average_not_sum(self):
        assert mean_remove_and_combine([1.0, 3.0], [0.0, 0.0]) == pytest.approx(2.0)

    def test_variance_reduction(self):
        rng = np.random.default_rng(2)
        dev = rng.normal(0.0, 1.5, size=(100_000, 16))
        out = mean_remove_and_combine(dev, np.zeros(16))
        assert out.var() == pytest.approx(1.5**2 / 16, rel=0.02)

    def test_missing_channels(self):
        x = np.array([1.0, np.nan, 3.0])
        assert mean_remove_and_combine(x, np.zeros(3)) == pytest.approx(2.0)
        assert math.isnan(mean_remove_and_combine(np.full(3, np.nan), np.zeros(3)))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mean_remove_and_combine([1.0, 2.0], [0.0, 0.0, 0.0])


class TestReflection:
    def test_extrema(self):
        refl = ReflectionParams(0.5)
        assert reflection_gain_from_excess(0.0, LAM, refl) == pytest.approx(20 * math.log10(1.5))
        assert reflection_gain_from_excess(0.0, LAM, refl) == pytest.approx(3.522, abs=1e-3)
        assert reflection_gain_from_excess(LAM / 2, LAM, refl) == pytest.approx(-6.021, abs=1e-3)

    def test_matches_two_ray_phasor(self):
        delta = np.linspace(0, 5 * LAM, 1001)
        for psi in (0.1, 0.4, 0.8):
            assert np.allclose(reflection_gain_from_excess(delta, LAM, ReflectionParams(psi)), two_ray_db(delta, LAM, psi))

    def test_small_psi_vanishes(self):
        g = reflection_gain_from_excess(np.linspace(0, 1, 50), LAM, ReflectionParams(1e-9))
        assert np.max(np.abs(g)) < 1e-7

    @settings(max_examples=200)
    @given(st.floats(0, 10), st.integers(-5, 5), st.floats(0.05, 0.95))
    def test_periodic_and_bounded(self, delta, n, psi):
        refl = ReflectionParams(psi)
        g = reflection_gain_from_excess(delta, LAM, refl)
        assert g == pytest.approx(reflection_gain_from_excess(delta + n * LAM, LAM, refl), abs=1e-6)
        assert 20 * math.log10(1 - psi) - 1e-9 <= g <= 20 * math.log10(1 + psi) + 1e-9

    def test_extrema_locations(self):
        refl = ReflectionParams(0.4)
        delta = np.linspace(0, 3 * LAM, 30_001)
        g = reflection_gain_from_excess(delta, LAM, refl)
        maxima = delta[1:-1][(g[1:-1] > g[:-2]) & (g[1:-1] >= g[2:])]
        minima = delta[1:-1][(g[1:-1] < g[:-2]) & (g[1:-1] <= g[2:])]
        assert np.allclose(maxima, [LAM, 2 * LAM], atol=1e-4)
        assert np.allclose(minima, [0.5 * LAM, 1.5 * LAM, 2.5 * LAM], atol=1e-4)

    def test_from_position(self):
        refl = ReflectionParams(0.4)
        link = Link("l", (0.0, 0.0), (4.0, 0.0), 2.4e9)
        assert reflection_gain((2, 1.5), link, refl) == pytest.approx(
            reflection_gain_from_excess(1.0, link.wavelength, refl)
        )


class TestShadow:
    ell = EllipseParams(A=0.15, B=0.25, rho=25.0, theta=0.0)

    def test_central_chord(self):
        assert shadow_loss_from_offset(0.0, self.ell) == pytest.approx(2 * 25.0 * 0.25)

    def test_grazing_is_zero(self):
        for theta in (0.0, 0.4, math.pi / 2):
            a = float(projected_half_width(0.15, 0.25, theta))
            assert shadow_loss_from_offset(a, self.ell, theta) == pytest.approx(0.0, abs=1e-9)
            assert shadow_loss_from_offset(a * 1.001, self.ell, theta) == 0.0

    @pytest.mark.parametrize("theta", [0.0, 0.3, 0.9, math.pi / 2])
    @pytest.mark.parametrize("frac", [0.0, 0.5, 0.9])
    def test_matches_quadrature(self, theta, frac):
        a = float(projected_half_width(0.15, 0.25, theta))
        d = frac * a
        expected = chord_by_quadrature(d, 0.15, 0.25, theta, 25.0)
        assert shadow_loss_from_offset(d, self.ell, theta) == pytest.approx(expected, rel=2e-3, abs=1e-3)

    def test_half_offset_closed_form(self):
        a = float(projected_half_width(0.15, 0.25, 0.0))
        expected = 2 * 25.0 * 0.15 * 0.25 / a * math.sqrt(3) / 2
        assert shadow_loss_from_offset(a / 2, self.ell) == pytest.approx(expected)

    @settings(max_examples=200)
    @given(st.floats(-0.5, 0.5), st.floats(-math.pi, math.pi))
    def test_even(self, d, theta):
        assert shadow_loss_from_offset(d, self.ell, theta) == pytest.approx(shadow_loss_from_offset(-d, self.ell, theta))

    def test_axes_swap(self):
        a0 = float(projected_half_width(0.15, 0.25, 0.0))
        a90 = float(projected_half_width(0.15, 0.25, math.pi / 2))
        assert a0 == pytest.approx(0.15)
        assert a90 == pytest.approx(0.25)

    def test_from_position_uses_perpendicular_offset(self):
        assert shadow_gain((1.0, 0.05), LINK, self.ell) == pytest.approx(shadow_loss_from_offset(0.05, self.ell))


class TestThreeState:
    refl = ReflectionParams(0.5)
    ell = EllipseParams(A=0.15, B=0.25, rho=25.0, theta=0.0)

    def test_branches(self):
        link = Link("l", (0.0, 0.0), (4.0, 0.0), 2.4e9)
        assert three_state_gain(PropagationState.NON_FADING, (2, 3), link, self.refl, self.ell) == 0.0
        assert three_state_gain(PropagationState.REFLECTION, (2, 0), link, self.refl, self.ell) == pytest.approx(3.522, abs=1e-3)
        assert three_state_gain(PropagationState.SHADOWING, (2, 0), link, self.refl, self.ell) == pytest.approx(-2 * 25 * 0.25)

    def test_true_state_rule(self):
        ell = EllipseParams()
        assert true_state((2.0, 0.05), LINK, ell) is PropagationState.SHADOWING
        assert true_state((4.2, 0.0), LINK, ell) is PropagationState.REFLECTION  # beyond the RX, excess 0.4 m
        assert true_state((5.0, 0.0), LINK, ell) is PropagationState.NON_FADING  # excess 2 m
        assert true_state((2.0, 0.3), LINK, ell) is PropagationState.REFLECTION
        assert true_state((2.0, 3.0), LINK, ell) is PropagationState.NON_FADING
