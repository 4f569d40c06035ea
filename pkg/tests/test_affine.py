import numpy as np
import pytest

from diffmerge.affine import (AffineMap, GaussianApprox, SingularMatrixError,
                              fit_affine, gaussian_product, score_sum_mismatch,
                              standardize, sym_sqrt)
from diffmerge.sde import VpSchedule


def random_spd(rng, d, scale=1.0):
    a = rng.normal(size=(d, d))
    return scale * (a @ a.T + d * np.eye(d))


def random_gaussian(rng, d):
    return GaussianApprox.from_moments(rng.normal(size=d), random_spd(rng, d))


def product_by_quadratic_expansion(components):
    """Brute-force product of Gaussian exponents.

    Expand -0.5 (x-mu_s)' P_s (x-mu_s) summed over s into -0.5 x'Px + b'x + c
    and complete the square.
    """
    P = sum(c.precision for c in components)
    b = sum(c.precision @ c.mean for c in components)
    cov = np.linalg.inv(P)
    return cov @ b, cov


class TestSymSqrt:
    def test_diagonal(self):
        s, si, ld = sym_sqrt(np.diag([4.0, 9.0]))
        assert np.allclose(s, np.diag([2.0, 3.0]))
        assert np.allclose(si, np.diag([0.5, 1 / 3]))
        assert ld == pytest.approx(np.log(6.0))

    def test_reconstruction(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            v = random_spd(rng, 4)
            s, si, _ = sym_sqrt(v)
            assert np.allclose(s @ s, v, rtol=1e-8)
            assert np.allclose(s @ si, np.eye(4), atol=1e-8)
            assert np.max(np.abs(s - s.T)) <= 1e-10

    def test_all_zero_raises(self):
        with pytest.raises(SingularMatrixError):
            sym_sqrt(np.zeros((3, 3)))

    def test_flooring_keeps_rank(self):
        # rank-1 matrix: small eigenvalues floored, no crash
        v = np.outer([1.0, 2.0], [1.0, 2.0])
        s, si, _ = sym_sqrt(v)
        assert np.all(np.isfinite(si))


class TestFitAffine:
    def test_diagonal_covariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(200_00, 2)) * np.array([2.0, 3.0])
        amap = fit_affine(x)
        assert np.allclose(amap.sqrt_cov, np.diag([2.0, 3.0]), atol=0.1)

    def test_sqrt_squares_to_covariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(500, 3)) @ rng.normal(size=(3, 3))
        amap = fit_affine(x)
        cov = np.cov(x, rowvar=False, ddof=1)
        assert np.allclose(amap.sqrt_cov @ amap.sqrt_cov, cov, rtol=1e-6)

    def test_identity_covariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(100_000, 2))
        amap = fit_affine(x)
        assert np.allclose(amap.sqrt_cov, np.eye(2), atol=0.02)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            fit_affine(np.zeros((3, 3)))


class TestStandardize:
    def test_identity_map(self):
        amap = AffineMap.identity(2)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(50, 2))
        g = rng.normal(size=(50, 2))
        z, gg = standardize(amap, x, g)
        assert np.array_equal(z, x)
        assert np.array_equal(gg, g)

    def test_moments_after_standardizing(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2000, 3)) @ rng.normal(size=(3, 3)) + [1.0, -2.0, 0.5]
        amap = fit_affine(x)
        z, _ = standardize(amap, x, np.zeros_like(x))
        assert np.max(np.abs(z.mean(axis=0))) <= 1e-8
        assert np.max(np.abs(np.cov(z, rowvar=False, ddof=1) - np.eye(3))) <= 1e-6

    def test_gaussian_score_transforms_to_standard(self):
        rng = np.random.default_rng(6)
        mu = np.array([2.0, -1.0])
        v = random_spd(rng, 2)
        x = rng.multivariate_normal(mu, v, size=5000)
        scores = -(x - mu) @ np.linalg.inv(v)
        # analytic map, not the fitted one, to use the exact chain rule
        s, si, ld = sym_sqrt(v)
        amap = AffineMap(mu, s, si, ld)
        z, g = standardize(amap, x, scores)
        assert np.allclose(g, -z, atol=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            standardize(AffineMap.identity(2), np.zeros((3, 2)), np.zeros((4, 2)))


class TestGaussianProduct:
    def test_equal_precision_average(self):
        a = GaussianApprox.from_moments(np.zeros(2), np.eye(2))
        b = GaussianApprox.from_moments(2 * np.ones(2), np.eye(2))
        prod = gaussian_product([a, b])
        assert np.allclose(prod.mean, np.ones(2))
        assert np.allclose(prod.cov, 0.5 * np.eye(2))

    def test_single_component(self):
        rng = np.random.default_rng(7)
        g = random_gaussian(rng, 3)
        prod = gaussian_product([g])
        assert np.allclose(prod.mean, g.mean)
        assert np.allclose(prod.cov, g.cov)

    def test_against_quadratic_expansion(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            comps = [random_gaussian(rng, 3) for _ in range(3)]
            prod = gaussian_product(comps)
            mean, cov = product_by_quadratic_expansion(comps)
            assert np.allclose(prod.mean, mean, atol=1e-12)
            assert np.allclose(prod.cov, cov, atol=1e-12)

    def test_order_invariant(self):
        rng = np.random.default_rng(9)
        comps = [random_gaussian(rng, 2) for _ in range(4)]
        a = gaussian_product(comps)
        b = gaussian_product(comps[::-1])
        assert np.allclose(a.mean, b.mean, atol=1e-12)
        assert np.allclose(a.cov, b.cov, atol=1e-12)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(10)
        with pytest.raises(ValueError):
            gaussian_product([random_gaussian(rng, 2), random_gaussian(rng, 3)])


class TestScoreSumMismatch:
    def test_agree_at_t0(self):
        rng = np.random.default_rng(11)
        comps = [random_gaussian(rng, 2) for _ in range(3)]
        tilde, correct = score_sum_mismatch(comps, VpSchedule(), 0.0)
        assert np.allclose(tilde.mean, correct.mean, atol=1e-10)
        assert np.allclose(tilde.cov, correct.cov, atol=1e-10)

    def test_equal_covariance_closed_form(self):
        # m^2 = s^2 = 1/2: correct variance 0.75 I, naive product 0.5 I
        from scipy.optimize import brentq
        sched = VpSchedule()
        t_half = brentq(lambda t: sched.mean_scale(t) ** 2 - 0.5, 1e-6, 1.0)
        comps = [GaussianApprox.from_moments(np.zeros(2), np.eye(2))
                 for _ in range(2)]
        tilde, correct = score_sum_mismatch(comps, sched, t_half)
        assert np.allclose(correct.cov, 0.75 * np.eye(2), atol=1e-10)
        assert np.allclose(tilde.cov, 0.5 * np.eye(2), atol=1e-10)

    def test_shrinkage_formula_general_t(self):
        # equal shard covariances: tilde cov = m^2 V + s^2/S
        rng = np.random.default_rng(12)
        v = random_spd(rng, 3)
        S = 4
        comps = [GaussianApprox.from_moments(rng.normal(size=3), v)
                 for _ in range(S)]
        sched = VpSchedule()
        for t in (0.2, 0.5, 0.9):
            m2 = sched.mean_scale(t) ** 2
            s2 = sched.noise_scale(t) ** 2
            tilde, correct = score_sum_mismatch(comps, sched, t)
            expected_tilde = m2 * (v / S) + (s2 / S) * np.eye(3)
            assert np.allclose(tilde.cov, expected_tilde, atol=1e-10)
            gap = correct.cov - tilde.cov
            assert np.allclose(gap, (1 - 1 / S) * s2 * np.eye(3), atol=1e-10)
            assert np.all(np.linalg.eigvalsh(gap) >= -1e-12)

    def test_zero_means_variances_differ(self):
        v = np.eye(2)
        comps = [GaussianApprox.from_moments(np.zeros(2), v) for _ in range(3)]
        for t in (0.1, 0.5, 0.9):
            tilde, correct = score_sum_mismatch(comps, VpSchedule(), t)
            assert np.allclose(tilde.mean, 0.0)
            assert np.allclose(correct.mean, 0.0)
            assert not np.allclose(tilde.cov, correct.cov, atol=1e-6)
