import numpy as np
import pytest
from scipy import special

from lrvb.expfam import (
    CategoricalBlock,
    DirichletBlock,
    GammaBlock,
    NormalBlock,
    categorical_moments,
    digamma,
    dirichlet_moments,
    gamma_moments,
    normal_moments,
    softmax_from_logits,
    trigamma,
)

from conftest import assert_within_se, mc_mean_cov

EULER_GAMMA = float(np.euler_gamma)


class TestSpecialFunctions:
    def test_digamma_recurrence(self):
        x = np.linspace(0.1, 100.0, 2000)
        lhs = digamma(x + 1.0)
        rhs = digamma(x) + 1.0 / x
        assert np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-300)) < 1e-12

    def test_trigamma_recurrence(self):
        x = np.linspace(0.1, 100.0, 2000)
        lhs = trigamma(x + 1.0)
        rhs = trigamma(x) - 1.0 / x**2
        assert np.max(np.abs(lhs - rhs) / np.abs(rhs)) < 1e-12

    def test_known_values(self):
        assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-13)
        assert trigamma(1.0) == pytest.approx(np.pi**2 / 6.0, abs=1e-13)
        # recurrence gives psi(2) = psi(1) + 1
        assert digamma(2.0) == pytest.approx(1.0 - EULER_GAMMA, abs=1e-13)

    def test_against_scipy(self):
        x = np.concatenate([np.geomspace(1e-3, 0.1, 50),
                            np.linspace(0.1, 150.0, 500)])
        assert np.allclose(digamma(x), special.digamma(x), rtol=1e-12, atol=0)
        assert np.allclose(trigamma(x), special.polygamma(1, x), rtol=1e-12, atol=0)

    def test_domain(self):
        with pytest.raises(ValueError):
            digamma(0.0)
        with pytest.raises(ValueError):
            trigamma(-1.0)


class TestDirichlet:
    def test_symmetric_two(self):
        m = dirichlet_moments(DirichletBlock(np.array([1.0, 1.0])))
        assert np.allclose(m.mean, [-1.0, -1.0], atol=1e-12)
        assert np.allclose(np.diag(m.cov), 1.0, atol=1e-12)
        off = 1.0 - np.pi**2 / 6.0
        assert m.cov[0, 1] == pytest.approx(off, abs=1e-12)

    def test_monte_carlo(self):
        alpha = np.array([3.0, 1.0, 2.0])
        m = dirichlet_moments(DirichletBlock(alpha))
        rng = np.random.default_rng(7)
        draws = np.log(rng.dirichlet(alpha, size=1_000_000))
        mean, cov, mean_se, cov_se = mc_mean_cov(draws)
        assert_within_se(m.mean, mean, mean_se, 3)
        assert_within_se(m.cov, cov, cov_se, 3)

    def test_domain(self):
        with pytest.raises(ValueError):
            DirichletBlock(np.array([1.0, 0.0]))
        with pytest.raises(ValueError):
            DirichletBlock(np.array([]))


class TestGamma:
    def test_unit(self):
        m = gamma_moments(GammaBlock(shape=1.0, rate=1.0))
        assert np.allclose(m.mean, [1.0, -EULER_GAMMA], atol=1e-12)
        expected = np.array([[1.0, 1.0], [1.0, np.pi**2 / 6.0]])
        assert np.allclose(m.cov, expected, atol=1e-12)

    def test_monte_carlo_prior_values(self):
        # the default precision prior, shape-rate convention
        m = gamma_moments(GammaBlock(shape=2.0001, rate=0.1))
        rng = np.random.default_rng(8)
        tau = rng.gamma(2.0001, scale=10.0, size=1_000_000)
        draws = np.column_stack([tau, np.log(tau)])
        mean, cov, mean_se, cov_se = mc_mean_cov(draws)
        assert_within_se(m.mean, mean, mean_se, 3)
        assert_within_se(m.cov, cov, cov_se, 3)

    def test_domain(self):
        with pytest.raises(ValueError):
            GammaBlock(shape=0.0, rate=1.0)
        with pytest.raises(ValueError):
            GammaBlock(shape=1.0, rate=-2.0)


class TestNormal:
    def test_standard(self):
        m = normal_moments(NormalBlock(mean=0.0, variance=1.0))
        assert np.allclose(m.mean, [0.0, 1.0], atol=1e-15)
        assert np.allclose(m.cov, [[1.0, 0.0], [0.0, 2.0]], atol=1e-15)

    def test_second_moment_variance_dominated_by_mean_term(self):
        m = normal_moments(NormalBlock(mean=2.0, variance=0.01))
        assert m.cov[1, 1] == pytest.approx(0.1602, abs=1e-15)
        # the 4 m^2 v term carries almost all of it
        assert 4.0 * 4.0 * 0.01 / m.cov[1, 1] > 0.998

    def test_monte_carlo(self):
        m = normal_moments(NormalBlock(mean=1.0, variance=0.25))
        rng = np.random.default_rng(9)
        theta = rng.normal(1.0, 0.5, size=1_000_000)
        draws = np.column_stack([theta, theta**2])
        mean, cov, mean_se, cov_se = mc_mean_cov(draws)
        assert_within_se(m.mean, mean, mean_se, 3)
        assert_within_se(m.cov, cov, cov_se, 3)

    def test_domain(self):
        with pytest.raises(ValueError):
            NormalBlock(mean=0.0, variance=0.0)


class TestCategorical:
    def test_two_point(self):
        m = categorical_moments(CategoricalBlock(logits=np.zeros(2)))
        assert np.allclose(m.cov, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)

    def test_degenerate(self):
        block = CategoricalBlock(logits=np.array([0.0, -np.inf]),
                                 probs=np.array([1.0, 0.0]))
        assert np.allclose(categorical_moments(block).cov, 0.0, atol=1e-15)

    def test_monte_carlo(self):
        probs = np.array([0.2, 0.3, 0.5])
        block = CategoricalBlock(logits=np.log(probs), probs=probs)
        m = categorical_moments(block)
        rng = np.random.default_rng(10)
        draws = rng.multinomial(1, probs, size=1_000_000).astype(float)
        mean, cov, mean_se, cov_se = mc_mean_cov(draws)
        assert_within_se(m.mean, mean, mean_se, 3)
        assert_within_se(m.cov, cov, cov_se, 3)

    def test_cov_annihilates_ones(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            probs = rng.dirichlet(np.ones(4))
            m = categorical_moments(CategoricalBlock(logits=np.log(probs), probs=probs))
            assert np.max(np.abs(m.cov @ np.ones(4))) < 1e-12
            assert np.linalg.matrix_rank(m.cov, tol=1e-10) <= 3


class TestSoftmax:
    def test_equal_logits(self):
        assert np.allclose(softmax_from_logits(np.zeros(3)), 1.0 / 3.0, atol=1e-15)

    def test_shift_invariance(self):
        # 1e-15 equality needs O(1) magnitudes: the shift l + c itself rounds
        # at ulp(|c|), so huge shifts cannot be exactly gauge-free in floats
        rng = np.random.default_rng(12)
        for _ in range(20):
            logits = rng.normal(size=5)
            c = rng.normal()
            a = softmax_from_logits(logits)
            b = softmax_from_logits(logits + c)
            assert np.max(np.abs(a - b)) < 1e-15
        assert np.allclose(softmax_from_logits(np.array([7.3, 7.3])), 0.5, atol=1e-15)

    def test_two_point_value(self):
        p = softmax_from_logits(np.array([1.0, 2.0]))
        expected = np.array([1.0, np.e]) / (1.0 + np.e)
        assert np.allclose(p, expected, rtol=1e-15)

    def test_all_minus_inf(self):
        with pytest.raises(ValueError):
            softmax_from_logits(np.array([-np.inf, -np.inf]))


class TestCovariancePositivity:
    def test_all_families_psd(self):
        rng = np.random.default_rng(14)
        moments = []
        for _ in range(15):
            moments.append(dirichlet_moments(DirichletBlock(rng.uniform(0.2, 8.0, 4))))
            moments.append(gamma_moments(GammaBlock(rng.uniform(0.2, 9.0),
                                                    rng.uniform(0.1, 4.0))))
            moments.append(normal_moments(NormalBlock(rng.normal() * 5,
                                                      rng.uniform(0.01, 9.0))))
            probs = rng.dirichlet(np.ones(3))
            moments.append(categorical_moments(
                CategoricalBlock(logits=np.log(probs), probs=probs)))
        for m in moments:
            smallest = np.linalg.eigvalsh(m.cov).min()
            assert smallest >= -1e-10 * np.trace(m.cov)
            assert np.max(np.abs(m.cov - m.cov.T)) <= 1e-12


class TestMomentsMatchSampling:
    """Every family's cov matches the empirical covariance of its draws."""

    def test_all_families(self):
        rng = np.random.default_rng(13)
        n = 200_000

        cases = []
        alpha = np.array([2.0, 0.7, 1.5])
        cases.append((dirichlet_moments(DirichletBlock(alpha)),
                      np.log(rng.dirichlet(alpha, size=n))))
        tau = rng.gamma(3.0, scale=1.0 / 2.0, size=n)
        cases.append((gamma_moments(GammaBlock(3.0, 2.0)),
                      np.column_stack([tau, np.log(tau)])))
        theta = rng.normal(-1.5, np.sqrt(2.0), size=n)
        cases.append((normal_moments(NormalBlock(-1.5, 2.0)),
                      np.column_stack([theta, theta**2])))
        probs = np.array([0.6, 0.1, 0.3])
        cases.append((categorical_moments(
            CategoricalBlock(logits=np.log(probs), probs=probs)),
            rng.multinomial(1, probs, size=n).astype(float)))

        for moments, draws in cases:
            mean, cov, mean_se, cov_se = mc_mean_cov(draws)
            assert_within_se(moments.mean, mean, mean_se, 4)
            assert_within_se(moments.cov, cov, cov_se, 4)
