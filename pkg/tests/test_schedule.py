"""Noise schedule construction and closed-form diffusion identities."""

from fractions import Fraction

import numpy as np
import pytest

from multiflow.schedule import (
    NoiseSchedule,
    ScheduleError,
    forward_diffuse,
    linear_betas,
    make_schedule,
    posterior_mean,
    scaled_linear_betas,
    snr,
)
from multiflow.tensor import ShapeError, Tensor


def exact_beta(t, T=1000, b0=Fraction(85, 100000), bT=Fraction(12, 1000)):
    """Rational-arithmetic interpolation oracle."""
    return b0 + Fraction(t - 1, T - 1) * (bT - b0)


class TestLinearBetas:
    def test_endpoints_default_schedule(self):
        s = linear_betas(1000, 0.00085, 0.012)
        assert s.beta[0] == pytest.approx(0.00085, abs=1e-15)
        assert s.beta[-1] == pytest.approx(0.012, abs=1e-15)

    def test_single_step(self):
        s = linear_betas(1, 0.5, 0.5)
        assert s.T == 1
        assert s.beta[0] == 0.5

    def test_midpoint_against_exact_oracle(self):
        s = linear_betas(1000, 0.00085, 0.012)
        assert abs(s.beta[500] - float(exact_beta(501))) < 1e-12

    def test_bad_endpoints(self):
        for args in [(10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0), (0, 0.1, 0.2)]:
            with pytest.raises(ScheduleError):
                linear_betas(*args)

    def test_monotone_and_decreasing_abar(self):
        s = linear_betas(1000, 0.00085, 0.012)
        assert np.all(np.diff(s.beta) >= 0)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert 0.0 < s.alpha_bar[-1] < s.alpha_bar[0] < 1.0
        assert s.alpha_bar[0] == pytest.approx(1 - 0.00085)

    def test_abar_matches_high_precision_product(self):
        s = linear_betas(1000, 0.00085, 0.012)
        acc = Fraction(1)
        ref = []
        for t in range(1, 1001):
            acc *= 1 - exact_beta(t)
            ref.append(float(acc))
        np.testing.assert_allclose(s.alpha_bar, ref, atol=1e-12)

    def test_scaled_linear_variant(self):
        s = scaled_linear_betas(1000, 0.00085, 0.012)
        assert s.beta[0] == pytest.approx(0.00085)
        assert s.beta[-1] == pytest.approx(0.012)
        assert not np.allclose(s.beta[500], linear_betas(1000, 0.00085, 0.012).beta[500])
        assert make_schedule("scaled_linear", 10, 0.001, 0.01).T == 10
        with pytest.raises(ScheduleError):
            make_schedule("cosine", 10, 0.001, 0.01)


class TestForwardDiffuse:
    def test_no_noise_limit(self):
        s = NoiseSchedule(np.array([1e-12]))
        z0 = Tensor([1.0, -2.0, 3.0])
        out = forward_diffuse(z0, 1, Tensor(np.zeros(3)), s)
        np.testing.assert_allclose(out.data, z0.data, atol=1e-9)

    def test_zero_eps_scaling(self):
        s = NoiseSchedule(np.array([0.19]))
        out = forward_diffuse(Tensor([2.0]), 1, Tensor([0.0]), s)
        np.testing.assert_allclose(out.data, [2.0 * np.sqrt(0.81)], rtol=1e-12)

    def test_hand_value(self):
        s = NoiseSchedule(np.array([0.19]))
        out = forward_diffuse(Tensor([1.0]), 1, Tensor([1.0]), s)
        assert out.data[0] == pytest.approx(0.9 + np.sqrt(0.19), abs=1e-12)

    def test_shape_mismatch(self):
        s = NoiseSchedule(np.array([0.19]))
        with pytest.raises(ShapeError):
            forward_diffuse(Tensor(np.zeros(3)), 1, Tensor(np.zeros(4)), s)

    def test_t_out_of_range(self):
        s = NoiseSchedule(np.array([0.19]))
        with pytest.raises(ScheduleError):
            forward_diffuse(Tensor([0.0]), 2, Tensor([0.0]), s)

    def test_variance_preservation(self):
        s = linear_betas(100, 0.001, 0.05)
        rng = np.random.default_rng(0)
        n = 10_000
        for t in (1, 50, 100):
            z0 = rng.standard_normal(n)
            eps = rng.standard_normal(n)
            zt = forward_diffuse(Tensor(z0), t, Tensor(eps), s).data
            assert np.var(zt) == pytest.approx(1.0, rel=0.05)

    def test_per_sample_steps(self):
        s = linear_betas(10, 0.01, 0.1)
        z0 = Tensor(np.ones((3, 2)))
        eps = Tensor(np.zeros((3, 2)))
        out = forward_diffuse(z0, np.array([1, 5, 10]), eps, s)
        expect = np.sqrt([s.abar(1), s.abar(5), s.abar(10)])
        np.testing.assert_allclose(out.data, np.stack([expect, expect], axis=1))


class TestPosteriorMean:
    def test_zero_eps_hat(self):
        s = NoiseSchedule(np.array([0.19]))
        out = posterior_mean(Tensor([1.0]), Tensor([0.0]), 1, s)
        assert out.data[0] == pytest.approx(1.0 / np.sqrt(0.81), rel=1e-12)

    def test_single_step_roundtrip(self):
        # with the true eps at t=1 the posterior mean recovers z0 exactly
        s = NoiseSchedule(np.array([0.37]))
        rng = np.random.default_rng(1)
        z0 = rng.normal(size=5)
        eps = rng.normal(size=5)
        zt = forward_diffuse(Tensor(z0), 1, Tensor(eps), s)
        mu = posterior_mean(zt, Tensor(eps), 1, s)
        np.testing.assert_allclose(mu.data, z0, atol=1e-10)

    def test_hand_value(self):
        s = NoiseSchedule(np.array([0.19]))
        out = posterior_mean(Tensor([0.0]), Tensor([1.0]), 1, s)
        assert out.data[0] == pytest.approx(-np.sqrt(0.19) / 0.9, abs=1e-12)

    def test_t_out_of_range(self):
        s = NoiseSchedule(np.array([0.19]))
        with pytest.raises(ScheduleError):
            posterior_mean(Tensor([0.0]), Tensor([0.0]), 0, s)


class TestSnr:
    def test_hand_value(self):
        s = NoiseSchedule(np.array([0.19]))
        assert snr(1, s) == pytest.approx(0.81 / 0.19, rel=1e-12)

    def test_strictly_decreasing(self):
        s = linear_betas(1000, 0.00085, 0.012)
        vals = np.array([snr(t, s) for t in range(1, 1001)])
        assert np.all(np.diff(vals) < 0)

    def test_small_at_T_for_paper_defaults(self):
        s = linear_betas(1000, 0.00085, 0.012)
        assert snr(1000, s) < 0.1
