import numpy as np
import pytest

from diffmerge.sde import VpSchedule


def trapezoid_beta_integral(sched, t, n=200_001):
    """Independent quadrature of int_0^t beta(u) du."""
    u = np.linspace(0.0, t, n)
    return np.trapezoid(sched.beta(u), u)


class TestMeanScale:
    def test_t_zero_is_one(self):
        assert VpSchedule().mean_scale(0.0) == 1.0

    def test_against_quadrature(self):
        sched = VpSchedule(0.1, 20.0)
        for t in (0.2, 0.5, 1.0):
            expected = np.exp(-0.5 * trapezoid_beta_integral(sched, t))
            assert sched.mean_scale(t) == pytest.approx(expected, rel=1e-9)
        assert sched.mean_scale(1.0) == pytest.approx(np.exp(-5.025), rel=1e-12)

    def test_constant_beta_closed_form(self):
        b = 3.0
        sched = VpSchedule(b, b + 1e-12)
        for t in (0.1, 0.7, 1.0):
            assert sched.mean_scale(t) == pytest.approx(np.exp(-b * t / 2), rel=1e-9)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            VpSchedule().mean_scale(-0.01)
        with pytest.raises(ValueError):
            VpSchedule().mean_scale(1.01)


class TestNoiseScale:
    def test_t_zero(self):
        assert VpSchedule().noise_scale(0.0) == 0.0

    def test_vp_identity(self):
        sched = VpSchedule()
        t = np.random.default_rng(0).uniform(0, 1, size=1000)
        resid = sched.mean_scale(t) ** 2 + sched.noise_scale(t) ** 2 - 1.0
        assert np.max(np.abs(resid)) <= 1e-12

    def test_t_one_value(self):
        sched = VpSchedule(0.1, 20.0)
        m1 = np.exp(-5.025)
        assert sched.noise_scale(1.0) == pytest.approx(np.sqrt(1 - m1**2), rel=1e-12)

    def test_monotone(self):
        sched = VpSchedule()
        rng = np.random.default_rng(1)
        t = np.sort(rng.uniform(0, 1, size=200))
        m = sched.mean_scale(t)
        s = sched.noise_scale(t)
        assert np.all(np.diff(m) < 0)
        assert np.all(np.diff(s) > 0)


class TestKappa:
    def test_zero_at_t0(self):
        assert VpSchedule().kappa(0.0, sigma_data=2.7) == 0.0

    def test_half_where_m_equals_s(self):
        sched = VpSchedule()
        # solve m(t) = s(t), i.e. m(t)^2 = 1/2
        from scipy.optimize import brentq
        t_star = brentq(lambda t: sched.mean_scale(t) ** 2 - 0.5, 1e-6, 1.0)
        assert sched.kappa(t_star, 1.0) == pytest.approx(0.5, abs=1e-10)

    def test_t_one(self):
        sched = VpSchedule(0.1, 20.0)
        s2 = sched.noise_scale(1.0) ** 2
        m2 = sched.mean_scale(1.0) ** 2
        assert sched.kappa(1.0, 1.0) == pytest.approx(s2 / (s2 + m2), rel=1e-12)
        assert sched.kappa(1.0, 1.0) == pytest.approx(0.999957, abs=1e-5)

    def test_equals_s2_for_unit_sigma(self):
        sched = VpSchedule()
        t = np.linspace(0.01, 1, 37)
        assert np.allclose(sched.kappa(t, 1.0), sched.noise_scale(t) ** 2, atol=1e-14)

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            VpSchedule().kappa(0.5, sigma_data=0.0)


class TestSampleTransition:
    def test_rejects_t0(self):
        with pytest.raises(ValueError):
            VpSchedule().sample_transition(np.zeros(2), 0.0, np.random.default_rng(0))

    def test_mean_path(self):
        sched = VpSchedule()

        class ZeroRng:
            def standard_normal(self, shape):
                return np.zeros(shape)

        x0 = np.array([1.5, -2.0])
        xt, eps = sched.sample_transition(x0, 0.4, ZeroRng())
        assert np.allclose(xt, sched.mean_scale(0.4) * x0)
        assert np.allclose(eps, 0.0)

    def test_limit_is_standard_gaussian(self):
        sched = VpSchedule()
        rng = np.random.default_rng(2)
        x0 = np.full((10_000, 2), 5.0)
        xt, _ = sched.sample_transition(x0, 1.0, rng)
        assert np.max(np.abs(xt.mean(axis=0))) <= 0.05
        assert np.allclose(xt.std(axis=0), 1.0, atol=0.05)

    def test_dsm_target_identity(self):
        sched = VpSchedule()
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(64, 3))
        t = rng.uniform(0.05, 1.0, size=64)
        xt, eps = sched.sample_transition(x0, t, rng)
        m = sched.mean_scale(t)[:, None]
        s = sched.noise_scale(t)[:, None]
        assert np.allclose(-(xt - m * x0) / s**2, -eps / s, atol=1e-10)

    def test_marginal_moments(self):
        sched = VpSchedule()
        rng = np.random.default_rng(4)
        x0 = np.array([2.0, -1.0])
        t = 0.3
        xt, _ = sched.sample_transition(np.tile(x0, (10_000, 1)), t, rng)
        m, s = sched.mean_scale(t), sched.noise_scale(t)
        se = s / np.sqrt(10_000)
        assert np.all(np.abs(xt.mean(axis=0) - m * x0) < 3 * se)
        assert np.allclose(xt.var(axis=0), s**2, rtol=0.1)


def test_invalid_schedule():
    with pytest.raises(ValueError):
        VpSchedule(0.0, 20.0)
    with pytest.raises(ValueError):
        VpSchedule(5.0, 1.0)
