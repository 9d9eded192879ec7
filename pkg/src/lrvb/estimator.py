"""Scikit-learn style front door for the mixture fit plus covariance correction.

``NormalMixtureLRVB`` wraps the functional core in the familiar
estimator shape so it drops into pipelines, grid searches, and anything
else speaking ``get_params``/``fit``/``predict``.  All statistical work is
delegated to :mod:`lrvb.mixture` and :mod:`lrvb.linear_response`.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .linear_response import assemble_sigma_q, build_layout, jacobian_M, lrvb_covariance
from .mixture import (
    DataMoments,
    FitOptions,
    MixturePriors,
    component_order,
    fit,
    point_estimates,
    update_z,
)

__all__ = ["NormalMixtureLRVB"]


class NormalMixtureLRVB(BaseEstimator):
    """Univariate normal mixture fit by mean-field VB, with corrected covariance.

    Parameters
    ----------
    n_components : int
        Number of mixture components.
    dirichlet_alpha, gamma_shape, gamma_rate, normal_mean, normal_variance : float
        Prior hyperparameters (symmetric across components).  The gamma
        prior is shape-rate; the normal prior is mean-variance.
    tol : float
        Sup-norm fixed-point tolerance over all mean parameters.
    max_iter : int
        Sweep budget per restart.
    n_restarts : int
        Extra perturbed starts beyond the deterministic quantile split.
    compute_covariance : bool
        Also assemble the linear-response covariance over the global
        parameters after fitting.
    random_state : int or None
        Seed for the restart perturbations (None behaves like 0).

    Attributes
    ----------
    posterior_ : MixturePosterior
    converged_ : bool
    n_iter_ : int
    final_residual_ : float
    point_estimates_ : dict with keys "logpi", "mu", "logtau"
    components_order_ : ndarray, components sorted by posterior mean
    covariance_ : ndarray, corrected covariance over the global block
    covariance_labels_ : list of str naming covariance_ rows/columns
    """

    def __init__(self, n_components=2, *, dirichlet_alpha=1.0,
                 gamma_shape=2.0001, gamma_rate=0.1, normal_mean=0.0,
                 normal_variance=100.0, tol=1e-9, max_iter=10_000,
                 n_restarts=2, compute_covariance=True, random_state=None):
        self.n_components = n_components
        self.dirichlet_alpha = dirichlet_alpha
        self.gamma_shape = gamma_shape
        self.gamma_rate = gamma_rate
        self.normal_mean = normal_mean
        self.normal_variance = normal_variance
        self.tol = tol
        self.max_iter = max_iter
        self.n_restarts = n_restarts
        self.compute_covariance = compute_covariance
        self.random_state = random_state

    def _validate_data_vector(self, X) -> np.ndarray:
        X = check_array(X, ensure_2d=False, dtype=float)
        if X.ndim == 2:
            if X.shape[1] != 1:
                raise ValueError("this estimator models univariate data; "
                                 f"got {X.shape[1]} columns")
            X = X[:, 0]
        return X

    def _priors(self) -> MixturePriors:
        return MixturePriors(
            dirichlet_alpha=self.dirichlet_alpha,
            gamma_shape=self.gamma_shape,
            gamma_rate=self.gamma_rate,
            normal_mean=self.normal_mean,
            normal_variance=self.normal_variance,
        )

    def fit(self, X, y=None):
        x = self._validate_data_vector(X)
        data = DataMoments.from_observations(x)
        opts = FitOptions(
            max_iterations=self.max_iter,
            tolerance=self.tol,
            n_restarts=self.n_restarts,
            seed=0 if self.random_state is None else int(self.random_state),
        )
        result = fit(data, self._priors(), self.n_components, opts)
        self.posterior_ = result.posterior
        self.converged_ = result.converged
        self.n_iter_ = result.iterations
        self.final_residual_ = result.final_residual
        pe = point_estimates(result.posterior)
        self.point_estimates_ = {"logpi": pe.logpi, "mu": pe.mu, "logtau": pe.logtau}
        self.components_order_ = component_order(result.posterior)
        self.n_features_in_ = 1
        if self.compute_covariance:
            layout = build_layout(self.n_components, x.size, "mixture")
            jac = jacobian_M(result.posterior, data, self._priors(), layout,
                             tol=self.tol)
            est = lrvb_covariance(assemble_sigma_q(result.posterior, layout),
                                  jac, layout)
            self.covariance_ = est.sigma_hat_theta
            self.covariance_labels_ = layout.theta_labels()
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Responsibilities of each component for new observations."""
        check_is_fitted(self, "posterior_")
        x = self._validate_data_vector(X)
        return update_z(DataMoments.from_observations(x), self.posterior_)

    def predict(self, X) -> np.ndarray:
        """Hard component assignments for new observations."""
        return np.argmax(self.predict_proba(X), axis=1)
