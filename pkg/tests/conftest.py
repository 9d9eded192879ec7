import numpy as np
import pytest

from lrvb.mixture import DataMoments, FitOptions, MixturePriors, fit


def mc_mean_cov(samples: np.ndarray):
    """Empirical mean/cov of sufficient-statistic draws plus their MC errors.

    The standard error of each covariance entry comes from the spread of the
    centered products, which is exact enough for tolerance checks.
    """
    s = samples.shape[0]
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (s - 1)
    mean_se = samples.std(axis=0, ddof=1) / np.sqrt(s)
    products = centered[:, :, None] * centered[:, None, :]
    cov_se = products.std(axis=0, ddof=1) / np.sqrt(s)
    return mean, cov, mean_se, cov_se


def assert_within_se(actual, expected, se, n_se, atol=1e-12):
    actual = np.asarray(actual, dtype=float)
    expected = np.asarray(expected, dtype=float)
    bound = n_se * np.asarray(se, dtype=float) + atol
    gap = np.abs(actual - expected)
    assert np.all(gap <= bound), (
        f"max deviation {gap.max():.3e} exceeds {n_se} MC standard errors "
        f"(bound {bound[np.unravel_index(gap.argmax(), gap.shape)]:.3e})"
    )


@pytest.fixture(scope="session")
def overlap_fit():
    """A converged K=2, N=50 mixture fit with every responsibility interior."""
    rng = np.random.default_rng(42)
    x = np.concatenate([rng.normal(-2.0, 1.0, 25), rng.normal(2.0, 1.0, 25)])
    data = DataMoments.from_observations(x)
    priors = MixturePriors()
    result = fit(data, priors, k=2, opts=FitOptions(seed=0))
    assert result.converged
    return data, priors, result
