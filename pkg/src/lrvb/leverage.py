"""Per-observation influence on posterior estimates via the covariance limit.

For the noisy-observation mixture (observed x* = latent x + noise of
variance sigma_x^2, mixture weights and precisions held at their true
values), the corrected covariance between theta and the latent x factors
to sigma_x^2 * L, and L survives the noise-to-zero limit:

    L = (I - R_tt - R_tz R_zt)^{-1} (R_tx + R_tz R_zx) V_x,

with V_x the per-observation blocks [[1, 2 x*], [2 x*, 4 x*^2]].  The x_n
columns of L are exactly d(theta means)/d(x*_n) of the converged fit, which
is what the perturb-and-refit oracle measures.  All production use goes
through this closed form; a finite-noise numerical route exists purely to
validate the limit, and classical regression leverage (the hat-matrix
diagonal) falls out of the same machinery as an analytic oracle.
"""

import time
from dataclasses import dataclass

import numpy as np

from .expfam import NormalBlock, normal_moments
from .linear_response import (
    MeanLayout,
    build_layout,
    corrected_solve,
    jacobian_M,
)
from .mixture import (
    DataMoments,
    FitOptions,
    FitResult,
    FrozenBlocks,
    MeanState,
    MixturePriors,
    MixturePosterior,
    _mu_params,
    _softmax_rows,
    _z_logits,
    fit,
    state_from_posterior,
)

__all__ = [
    "LeverageModel",
    "LeverageWorkspace",
    "LeverageScores",
    "LinearModelCase",
    "LinearLeverage",
    "PerturbationError",
    "mixture_leverage",
    "manual_perturbation",
    "manual_perturbation_all",
    "linear_leverage",
    "linear_leverage_via_lrvb",
    "small_sigma_covariance",
    "LEVERAGE_FIT_TOLERANCE",
]

# Perturb-and-refit needs a tighter fixed point than ordinary reporting.
LEVERAGE_FIT_TOLERANCE = 1e-11


class PerturbationError(RuntimeError):
    """A perturbed refit failed to converge; names the offending side."""


@dataclass(frozen=True)
class LeverageModel:
    """Noisy-observation mixture with pi and tau pinned at their true values."""

    data_star: np.ndarray
    truth_pi: np.ndarray
    truth_tau: np.ndarray
    mu_prior_mean: float = 0.0
    mu_prior_variance: float = 100.0
    sigma_x2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "data_star", np.asarray(self.data_star, dtype=float))
        object.__setattr__(self, "truth_pi", np.asarray(self.truth_pi, dtype=float))
        object.__setattr__(self, "truth_tau", np.asarray(self.truth_tau, dtype=float))
        if abs(self.truth_pi.sum() - 1.0) > 1e-10 or np.any(self.truth_pi <= 0.0):
            raise ValueError("truth_pi must be a strictly positive simplex vector")
        if np.any(self.truth_tau <= 0.0):
            raise ValueError("truth_tau must be strictly positive")
        if self.sigma_x2 < 0.0:
            raise ValueError("sigma_x2 must be nonnegative")

    @property
    def k(self) -> int:
        return self.truth_pi.size

    @property
    def n(self) -> int:
        return self.data_star.size

    def priors(self) -> MixturePriors:
        return MixturePriors(normal_mean=self.mu_prior_mean,
                             normal_variance=self.mu_prior_variance)

    def frozen(self) -> FrozenBlocks:
        return FrozenBlocks(pi=self.truth_pi, tau=self.truth_tau)

    def data_moments(self) -> DataMoments:
        return DataMoments(ex=self.data_star,
                           ex2=self.data_star**2 + self.sigma_x2)


@dataclass(frozen=True)
class LeverageWorkspace:
    """Jacobian pieces entering the score formula, plus the rescaled x rows.

    The x-row blocks scale linearly with the observation noise
    (R_x. = sigma_x^2 Q_x.), so the workspace stores the Q factors.
    """

    v_x: np.ndarray    # (N, 2, 2) noise-free x-block covariance factors
    q_xt: np.ndarray   # (X, T)
    q_xz: np.ndarray   # (X, Z)
    r_tt: np.ndarray
    r_tx: np.ndarray
    r_tz: np.ndarray
    r_zx: np.ndarray
    r_zt: np.ndarray


@dataclass(frozen=True)
class LeverageScores:
    """L over all theta x (x_n, x_n^2) coordinates plus the reported slice."""

    L: np.ndarray           # (theta_dim, x_dim)
    mu_scores: np.ndarray   # (K, N): mu_k rows against x_n columns
    fit: FitResult
    layout: MeanLayout
    workspace: LeverageWorkspace


def _v_x_blocks(x_star: np.ndarray) -> np.ndarray:
    n = x_star.size
    v = np.empty((n, 2, 2))
    v[:, 0, 0] = 1.0
    v[:, 0, 1] = v[:, 1, 0] = 2.0 * x_star
    v[:, 1, 1] = 4.0 * x_star**2
    return v


def _q_x_rows(post: MixturePosterior, frozen: FrozenBlocks,
              layout: MeanLayout, v_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """x-row derivative factors with the noise variance divided out."""
    s = state_from_posterior(post, frozen)
    resp, t, u = s.resp, s.tau, s.mu
    n_obs, k_comp = resp.shape
    q_xt = np.zeros((n_obs, 2, layout.theta_dim))
    q_xz = np.zeros((n_obs, 2, n_obs, k_comp))
    deta_x_dz = np.vstack([t * u, -0.5 * t])  # (2, K)
    for n in range(n_obs):
        q_xz[n, :, n, :] = v_x[n] @ deta_x_dz
        for k in range(k_comp):
            mr = layout.mu_index(k)
            q_xt[n, :, mr] = v_x[n] @ np.array([resp[n, k] * t[k], 0.0])
    return q_xt.reshape(layout.x_dim, layout.theta_dim), \
        q_xz.reshape(layout.x_dim, layout.z_dim)


def mixture_leverage(model: LeverageModel, opts: FitOptions | None = None,
                     base: FitResult | None = None) -> LeverageScores:
    """Influence scores in the analytic noise-to-zero closed form.

    Fits the frozen-weights model with the latent-x moments pinned at
    (x*, x*^2), then evaluates L without any small-noise numerics.  Passing
    ``base`` reuses an existing converged fit (the perturbation oracle warm
    starts from the same one, so the two paths share their starting point).
    """
    opts = opts or FitOptions(tolerance=LEVERAGE_FIT_TOLERANCE)
    data = DataMoments(ex=model.data_star, ex2=model.data_star**2)
    priors = model.priors()
    frozen = model.frozen()
    result = base if base is not None else fit(data, priors, model.k, opts,
                                               frozen=frozen)
    if not result.converged:
        raise PerturbationError(
            f"base fit did not converge (residual {result.final_residual:.3e})"
        )
    layout = build_layout(model.k, model.n, "mixture_leverage")
    jac = jacobian_M(result.posterior, data, priors, layout, frozen,
                     tol=opts.tolerance)
    v_x = _v_x_blocks(model.data_star)
    q_xt, q_xz = _q_x_rows(result.posterior, frozen, layout, v_x)

    system = np.eye(layout.theta_dim) - jac.r_tt - jac.r_tz @ jac.r_zt
    coupling = jac.r_tx + jac.r_tz @ jac.r_zx
    # right-multiply by the block-diagonal V_x one observation at a time
    coupling_vx = np.empty_like(coupling)
    for n in range(model.n):
        cols = slice(2 * n, 2 * n + 2)
        coupling_vx[:, cols] = coupling[:, cols] @ v_x[n]
    L = corrected_solve(system, coupling_vx, "leverage score solve")

    mu_rows = [layout.mu_index(k) for k in range(model.k)]
    mu_scores = L[mu_rows][:, 0::2]
    workspace = LeverageWorkspace(v_x=v_x, q_xt=q_xt, q_xz=q_xz,
                                  r_tt=jac.r_tt, r_tx=jac.r_tx, r_tz=jac.r_tz,
                                  r_zx=jac.r_zx, r_zt=jac.r_zt)
    return LeverageScores(L=L, mu_scores=mu_scores, fit=result, layout=layout,
                          workspace=workspace)


# ---------------------------------------------------------------------------
# Perturb-and-refit oracle
# ---------------------------------------------------------------------------


def _refit_mu(model: LeverageModel, x: np.ndarray, base: MixturePosterior,
              opts: FitOptions, side: str) -> np.ndarray:
    data = DataMoments(ex=x, ex2=x**2)
    result = fit(data, model.priors(), model.k, opts, frozen=model.frozen(),
                 init=base)
    if not result.converged:
        raise PerturbationError(
            f"{side} refit did not converge (residual {result.final_residual:.3e})"
        )
    return np.array([b.mean for b in result.posterior.mu])


def manual_perturbation(model: LeverageModel, n: int, delta: float | None = None,
                        base: FitResult | None = None,
                        opts: FitOptions | None = None) -> np.ndarray:
    """Central-difference d(E[mu_k])/d(x*_n) from two warm-started refits."""
    opts = opts or FitOptions(tolerance=LEVERAGE_FIT_TOLERANCE)
    if delta is None:
        delta = 0.01 * float(np.std(model.data_star))
    if delta <= 0.0:
        raise ValueError("delta must be strictly positive")
    if base is None:
        base_data = DataMoments(ex=model.data_star, ex2=model.data_star**2)
        base = fit(base_data, model.priors(), model.k, opts, frozen=model.frozen())
        if not base.converged:
            raise PerturbationError("base fit did not converge")
    plus = model.data_star.copy()
    minus = model.data_star.copy()
    plus[n] += delta
    minus[n] -= delta
    mu_plus = _refit_mu(model, plus, base.posterior, opts, f"+delta (obs {n})")
    mu_minus = _refit_mu(model, minus, base.posterior, opts, f"-delta (obs {n})")
    return (mu_plus - mu_minus) / (2.0 * delta)


def manual_perturbation_all(model: LeverageModel, delta: float | None = None,
                            opts: FitOptions | None = None,
                            base: FitResult | None = None) -> tuple[np.ndarray, float]:
    """Scores for every observation; returns ((K, N) matrix, wall seconds)."""
    opts = opts or FitOptions(tolerance=LEVERAGE_FIT_TOLERANCE)
    if base is None:
        base_data = DataMoments(ex=model.data_star, ex2=model.data_star**2)
        base = fit(base_data, model.priors(), model.k, opts, frozen=model.frozen())
        if not base.converged:
            raise PerturbationError("base fit did not converge")
    start = time.perf_counter()
    scores = np.empty((model.k, model.n))
    for n in range(model.n):
        scores[:, n] = manual_perturbation(model, n, delta=delta, base=base, opts=opts)
    return scores, time.perf_counter() - start


# ---------------------------------------------------------------------------
# Finite-noise validation route
# ---------------------------------------------------------------------------


def _fit_noisy(model: LeverageModel, opts: FitOptions):
    """Coordinate fit of the finite-noise model with the x factors live."""
    if model.sigma_x2 <= 0.0:
        raise ValueError("the finite-noise route needs sigma_x2 > 0")
    sigma2 = model.sigma_x2
    x_star = model.data_star
    priors = model.priors()
    frozen = model.frozen()
    t = model.truth_tau

    base = fit(model.data_moments(), priors, model.k, opts, frozen=frozen)
    s = state_from_posterior(base.posterior, frozen)
    a = model.data_moments().ex.copy()
    b = model.data_moments().ex2.copy()

    def x_update(resp, u):
        prec = 1.0 / sigma2 + resp @ t
        var = 1.0 / prec
        mean = var * (x_star / sigma2 + resp @ (t * u))
        return mean, var

    for _ in range(opts.max_iterations):
        data = DataMoments(ex=a, ex2=b)
        resp = _softmax_rows(_z_logits(data, s))
        mu_mean, mu_var = _mu_params(priors, data, resp, s.tau)
        s = MeanState(s.logpi, mu_mean, mu_mean**2 + mu_var, s.tau, s.logtau, resp)
        mean_x, var_x = x_update(resp, mu_mean)
        gap = max(np.max(np.abs(mean_x - a)), np.max(np.abs(mean_x**2 + var_x - b)))
        a, b = mean_x, mean_x**2 + var_x
        if gap < opts.tolerance:
            # simultaneous-map residual over (z, mu, x)
            data = DataMoments(ex=a, ex2=b)
            r2 = _softmax_rows(_z_logits(data, s))
            m2, v2 = _mu_params(priors, data, s.resp, s.tau)
            mx, vx = x_update(s.resp, s.mu)
            resid = max(
                np.max(np.abs(r2 - s.resp)),
                np.max(np.abs(m2 - s.mu)),
                np.max(np.abs(m2**2 + v2 - s.mu2)),
                np.max(np.abs(mx - a)),
                np.max(np.abs(mx**2 + vx - b)),
            )
            if resid <= opts.tolerance:
                post = MixturePosterior(
                    pi=base.posterior.pi,
                    mu=tuple(NormalBlock(m_, v_) for m_, v_ in zip(mu_mean, mu_var)),
                    tau=base.posterior.tau,
                    resp=resp,
                )
                _, var_x = x_update(resp, mu_mean)
                return post, DataMoments(ex=a, ex2=b), var_x
    raise PerturbationError("finite-noise coordinate fit did not converge")


def small_sigma_covariance(model: LeverageModel,
                           opts: FitOptions | None = None) -> np.ndarray:
    """Corrected theta-x covariance at finite noise (validation mode only).

    Fits the noisy model with the latent-x factors live, assembles the full
    Jacobian including the x rows, Schur-eliminates z over the (theta, x)
    pair, and returns the theta-x corner of the corrected covariance.  Up to
    O(sigma_x^4) this equals sigma_x^2 times the analytic scores.
    """
    opts = opts or FitOptions(tolerance=LEVERAGE_FIT_TOLERANCE)
    post, data, var_x = _fit_noisy(model, opts)
    priors = model.priors()
    frozen = model.frozen()
    layout = build_layout(model.k, model.n, "mixture_leverage")
    jac = jacobian_M(post, data, priors, layout, frozen, tol=opts.tolerance,
                     x_rows_sigma2=model.sigma_x2)

    T, X = layout.theta_dim, layout.x_dim
    system = np.eye(T + X)
    system[:T, :T] -= jac.r_tt + jac.r_tz @ jac.r_zt
    system[:T, T:] -= jac.r_tx + jac.r_tz @ jac.r_zx
    system[T:, :T] -= jac.r_xt + jac.r_xz @ jac.r_zt
    system[T:, T:] -= jac.r_xz @ jac.r_zx

    v = np.zeros((T + X, T + X))
    for k in range(model.k):
        i = layout.mu_index(k)
        v[i:i + 2, i:i + 2] = normal_moments(post.mu[k]).cov
    for n in range(model.n):
        cov = normal_moments(NormalBlock(data.ex[n], var_x[n])).cov
        v[T + 2 * n:T + 2 * n + 2, T + 2 * n:T + 2 * n + 2] = cov

    sigma_hat = corrected_solve(system, v, "finite-noise covariance solve")
    return sigma_hat[:T, T:]


# ---------------------------------------------------------------------------
# Classical linear-model leverage
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearModelCase:
    """Known-variance regression with noisy responses of variance epsilon."""

    design: np.ndarray
    sigma2: float
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "design", np.asarray(self.design, dtype=float))
        if self.design.ndim != 2:
            raise ValueError("design must be an N x p matrix")
        if not self.sigma2 > 0.0:
            raise ValueError("sigma2 must be strictly positive")
        if not 0.0 <= self.epsilon < self.sigma2:
            raise ValueError("need 0 <= epsilon < sigma2")
        if np.linalg.matrix_rank(self.design) < self.design.shape[1]:
            raise ValueError("design matrix is rank deficient")


@dataclass(frozen=True)
class LinearLeverage:
    cov_beta_y: np.ndarray    # (p, N)
    cov_yhat_y: np.ndarray    # (N, N)
    limit_scores: np.ndarray  # (N,) -> diag of the projection as epsilon -> 0
    beta_cov: np.ndarray      # (p, p)


def linear_leverage(case: LinearModelCase) -> LinearLeverage:
    """Closed forms: Cov(beta, Y) = eps a (X'X)^{-1} X', Cov(Yhat, Y) = eps a P_X."""
    x = case.design
    gram = x.T @ x
    alpha = case.sigma2 / (case.sigma2 - case.epsilon)
    gram_inv_xt = np.linalg.solve(gram, x.T)
    projection = x @ gram_inv_xt
    cov_beta_y = case.epsilon * alpha * gram_inv_xt
    cov_yhat_y = case.epsilon * alpha * projection
    beta_cov = alpha * case.sigma2 * np.linalg.solve(gram, np.eye(x.shape[1]))
    return LinearLeverage(cov_beta_y=cov_beta_y, cov_yhat_y=cov_yhat_y,
                          limit_scores=np.diag(projection).copy(),
                          beta_cov=beta_cov)


def linear_leverage_via_lrvb(case: LinearModelCase) -> LinearLeverage:
    """The same quantities through the generic correction solve.

    Stacks (beta, Y) coordinates, with the factorized covariance
    diag(sigma2 (X'X)^{-1}, eps I) and the cross-derivatives X'/sigma2 and
    X/sigma2; the quadratic response statistics never feed back into the
    means for a normal target, so only the mean coordinates appear.
    """
    if case.epsilon <= 0.0:
        raise ValueError("the correction route needs epsilon > 0")
    x = case.design
    n, p = x.shape
    gram = x.T @ x
    v_beta = case.sigma2 * np.linalg.solve(gram, np.eye(p))
    r = np.zeros((p + n, p + n))
    r[:p, p:] = v_beta @ (x.T / case.sigma2)
    r[p:, :p] = case.epsilon * x / case.sigma2
    v = np.zeros((p + n, p + n))
    v[:p, :p] = v_beta
    v[p:, p:] = case.epsilon * np.eye(n)
    sigma_hat = corrected_solve(np.eye(p + n) - r, v, "linear leverage solve")
    cov_beta_y = sigma_hat[:p, p:]
    cov_yhat_y = x @ cov_beta_y
    alpha = case.sigma2 / (case.sigma2 - case.epsilon)
    limit_scores = np.diag(cov_yhat_y) / (case.epsilon * alpha)
    return LinearLeverage(cov_beta_y=cov_beta_y, cov_yhat_y=cov_yhat_y,
                          limit_scores=limit_scores.copy(),
                          beta_cov=sigma_hat[:p, :p])
