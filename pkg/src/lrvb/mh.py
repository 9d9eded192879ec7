"""Ground-truth posterior moments from a Metropolis-Hastings independence sampler.

The chain runs on the collapsed mixture posterior (indicators summed out)
over unconstrained coordinates: additive-logistic weights, raw means, and
log precisions.  Proposals are drawn independently from a normal centered
at the MAP; starting there and never random-walking keeps the chain pinned
to one labeling of the components, so no relabeling post-processing is
needed.  Because proposals are independent, the whole proposal batch and
both density evaluations vectorize; only the accept/reject scan is
sequential.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln, logsumexp

from .mixture import MixturePriors, PointEstimates

__all__ = [
    "UnconstrainedParams",
    "MhConfig",
    "PosteriorDraws",
    "SampleMoments",
    "MapOptimizationError",
    "pi_from_logits",
    "logits_from_pi",
    "log_posterior",
    "log_posterior_batch",
    "find_map",
    "independence_sampler",
    "mh_independence",
    "proposal_covariance_from_theta",
    "sample_moments",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class MapOptimizationError(RuntimeError):
    """MAP search failed its gradient check; carries the last iterate."""

    def __init__(self, message: str, last_iterate: np.ndarray):
        super().__init__(message)
        self.last_iterate = last_iterate


# ---------------------------------------------------------------------------
# Unconstrained parameterization
# ---------------------------------------------------------------------------


def pi_from_logits(logits: np.ndarray) -> np.ndarray:
    """Additive-logistic inverse: K-1 free coordinates to a K-simplex point."""
    full = np.append(np.asarray(logits, dtype=float), 0.0)
    full -= full.max()
    w = np.exp(full)
    return w / w.sum()


def logits_from_pi(pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    return np.log(pi[:-1]) - np.log(pi[-1])


@dataclass(frozen=True)
class UnconstrainedParams:
    """Sampler coordinates: (K-1) weight logits, K means, K log precisions."""

    pi_logits: np.ndarray
    mu: np.ndarray
    log_tau: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi_logits", np.atleast_1d(np.asarray(self.pi_logits, dtype=float)))
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "log_tau", np.asarray(self.log_tau, dtype=float))
        k = self.mu.size
        if self.log_tau.size != k or self.pi_logits.size != k - 1:
            raise ValueError("need K-1 weight logits and K entries in mu and log_tau")
        for arr in (self.pi_logits, self.mu, self.log_tau):
            if not np.all(np.isfinite(arr)):
                raise ValueError("unconstrained parameters must be finite")

    @property
    def k(self) -> int:
        return self.mu.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.pi_logits, self.mu, self.log_tau])

    @classmethod
    def from_vector(cls, v: np.ndarray, k: int) -> "UnconstrainedParams":
        v = np.asarray(v, dtype=float)
        return cls(pi_logits=v[:k - 1], mu=v[k - 1:2 * k - 1], log_tau=v[2 * k - 1:])

    @classmethod
    def from_point_estimates(cls, pe: PointEstimates) -> "UnconstrainedParams":
        pi = np.exp(pe.logpi)
        pi = pi / pi.sum()
        return cls(pi_logits=logits_from_pi(pi), mu=pe.mu.copy(),
                   log_tau=pe.logtau.copy())


@dataclass(frozen=True)
class MhConfig:
    n_draws: int = 100_000
    n_burn: int = 5_000
    proposal_scale: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if not self.n_draws > self.n_burn >= 0:
            raise ValueError("need n_draws > n_burn >= 0")
        if self.proposal_scale <= 0.0:
            raise ValueError("proposal_scale must be strictly positive")


@dataclass(frozen=True)
class PosteriorDraws:
    """Retained draws in (log pi [K], mu [K], log tau [K]) coordinates."""

    draws: np.ndarray
    acceptance_rate: float
    low_acceptance: bool
    k: int


@dataclass(frozen=True)
class SampleMoments:
    """Label-aligned per-coordinate mean/sd and the sd's batch-means error."""

    mean: np.ndarray
    sd: np.ndarray
    sd_mc_se: np.ndarray
    order: np.ndarray


# ---------------------------------------------------------------------------
# Collapsed log posterior over the unconstrained coordinates
# ---------------------------------------------------------------------------


def log_posterior_batch(params: np.ndarray, x: np.ndarray,
                        priors: MixturePriors, k: int) -> np.ndarray:
    """Joint log density (likelihood, priors, transform Jacobians) for each row.

    Includes all normalizing constants, so values differ from the true log
    posterior only by the evidence.
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    x = np.asarray(x, dtype=float)
    c = params.shape[0]
    n = x.size
    logits = np.concatenate([params[:, :k - 1], np.zeros((c, 1))], axis=1)
    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    mu = params[:, k - 1:2 * k - 1]
    log_tau = params[:, 2 * k - 1:]
    tau = np.exp(log_tau)

    out = np.zeros(c)
    # mixture likelihood: accumulate the K per-component planes with
    # logaddexp, chunked over rows to bound the (rows, N) buffers
    chunk = max(1, int(4_000_000 / max(1, n)))
    for lo in range(0, c, chunk):
        hi = min(c, lo + chunk)
        total = None
        for j in range(k):
            dev = x[None, :] - mu[lo:hi, j, None]
            plane = (log_pi[lo:hi, j, None] + 0.5 * log_tau[lo:hi, j, None]
                     - 0.5 * LOG_2PI - 0.5 * tau[lo:hi, j, None] * dev**2)
            total = plane if total is None else np.logaddexp(total, plane)
        out[lo:hi] = total.sum(axis=1)

    a0 = priors.dirichlet_alpha
    out += gammaln(k * a0) - k * gammaln(a0) + (a0 - 1.0) * log_pi.sum(axis=1)
    ga, gb = priors.gamma_shape, priors.gamma_rate
    out += np.sum(ga * np.log(gb) - gammaln(ga) + (ga - 1.0) * log_tau - gb * tau, axis=1)
    m0, v0 = priors.normal_mean, priors.normal_variance
    out += np.sum(-0.5 * np.log(2.0 * np.pi * v0) - (mu - m0)**2 / (2.0 * v0), axis=1)
    # change of variables: d pi / d logits and d tau / d log tau
    out += log_pi.sum(axis=1) + log_tau.sum(axis=1)
    return out


def log_posterior(params: UnconstrainedParams, x: np.ndarray,
                  priors: MixturePriors) -> float:
    return float(log_posterior_batch(params.as_vector()[None, :], x, priors,
                                     params.k)[0])


# ---------------------------------------------------------------------------
# MAP search
# ---------------------------------------------------------------------------


def _central_gradient(fun, u: np.ndarray, step: float = 1e-6) -> np.ndarray:
    grad = np.empty_like(u)
    for i in range(u.size):
        h = step * max(1.0, abs(u[i]))
        plus = u.copy()
        minus = u.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (fun(plus) - fun(minus)) / (2.0 * h)
    return grad


def find_map(x: np.ndarray, priors: MixturePriors,
             init: UnconstrainedParams) -> UnconstrainedParams:
    """Quasi-Newton ascent of the collapsed log posterior from a warm start.

    Dimension is 3K - 1, tiny, so numerical central-difference gradients are
    cheap and exact enough.  Fails loudly (with the last iterate attached) if
    the gradient check does not pass.
    """
    k = init.k
    x = np.asarray(x, dtype=float)

    def value(u):
        return float(log_posterior_batch(u[None, :], x, priors, k)[0])

    def neg(u):
        return -value(u)

    def neg_grad(u):
        return _central_gradient(neg, u)

    u0 = init.as_vector()
    value0 = value(u0)
    best = u0
    for _ in range(3):
        res = minimize(neg, best, method="BFGS", jac=neg_grad,
                       options={"maxiter": 1000, "gtol": 1e-10})
        best = res.x
        val = value(best)
        grad = _central_gradient(value, best)
        if np.max(np.abs(grad)) < 1e-6 * (1.0 + abs(val)) and val >= value0 - 1e-9:
            return UnconstrainedParams.from_vector(best, k)
    raise MapOptimizationError(
        f"MAP gradient check failed: |grad|_inf = {np.max(np.abs(grad)):.3e} "
        f"at value {val:.6f}", best)


# ---------------------------------------------------------------------------
# Independence sampler
# ---------------------------------------------------------------------------


def _chol_psd(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    jitter = 0.0
    for _ in range(6):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-12 * max(np.trace(cov), 1e-300))
    raise np.linalg.LinAlgError("proposal covariance is not positive definite")


def independence_sampler(log_density, center: np.ndarray, cov: np.ndarray,
                         cfg: MhConfig):
    """Generic independence sampler with a normal proposal.

    ``log_density`` maps a (rows, d) batch to (rows,) log densities.  The
    proposal batch is drawn up front; only the accept scan is sequential.
    Deterministic given ``cfg.seed``.  Returns (chain, acceptance rate over
    the post-burn-in stretch).
    """
    center = np.asarray(center, dtype=float)
    d = center.size
    rng = np.random.default_rng(cfg.seed)
    chol = _chol_psd(np.asarray(cov, dtype=float))
    z = rng.standard_normal((cfg.n_draws, d))
    proposals = center + z @ chol.T
    # proposal log density, sharing the Cholesky factor
    log_det = np.sum(np.log(np.diag(chol)))
    log_g = -0.5 * np.sum(z**2, axis=1) - log_det - 0.5 * d * LOG_2PI
    log_p = np.asarray(log_density(proposals), dtype=float)
    weight = log_p - log_g

    u = np.log(rng.random(cfg.n_draws))
    # the chain starts at the center, whose proposal density has no quadratic term
    w_current = float(log_density(center[None, :])[0]) + log_det + 0.5 * d * LOG_2PI
    take = np.empty(cfg.n_draws, dtype=np.int64)
    current = -1
    accepted_tail = 0
    for i in range(cfg.n_draws):
        if u[i] < weight[i] - w_current:
            current = i
            w_current = weight[i]
            if i >= cfg.n_burn:
                accepted_tail += 1
        take[i] = current
    chain = np.where(take[:, None] >= 0, proposals[np.maximum(take, 0)], center)
    tail = cfg.n_draws - cfg.n_burn
    return chain, accepted_tail / tail


def proposal_covariance_from_theta(sigma_theta: np.ndarray, layout) -> np.ndarray:
    """Map a theta-coordinate covariance to the unconstrained coordinates.

    Selects the (log pi, mu, log tau) rows and applies the exact linear map
    y_k = log pi_k - log pi_K; mu and log tau pass through unchanged.
    """
    k = layout.k
    sel = ([layout.logpi_index(j) for j in range(k)]
           + [layout.mu_index(j) for j in range(k)]
           + [layout.logtau_index(j) for j in range(k)])
    sub = sigma_theta[np.ix_(sel, sel)]
    b = np.zeros((3 * k - 1, 3 * k))
    b[:k - 1, :k - 1] = np.eye(k - 1)
    b[:k - 1, k - 1] = -1.0
    b[k - 1:, k:] = np.eye(2 * k)
    return b @ sub @ b.T


def mh_independence(x: np.ndarray, priors: MixturePriors,
                    map_point: UnconstrainedParams, cfg: MhConfig,
                    proposal_cov: np.ndarray) -> PosteriorDraws:
    """Mixture chain: independence proposals centered at the MAP.

    ``proposal_cov`` lives in the unconstrained coordinates and is inflated
    by ``cfg.proposal_scale`` squared.  Draws are reported in (log pi, mu,
    log tau) coordinates, burn-in dropped.
    """
    k = map_point.k
    x = np.asarray(x, dtype=float)

    def density(batch):
        return log_posterior_batch(batch, x, priors, k)

    cov = cfg.proposal_scale**2 * np.asarray(proposal_cov, dtype=float)
    chain, acceptance = independence_sampler(density, map_point.as_vector(),
                                             cov, cfg)
    kept = chain[cfg.n_burn:]
    logits = np.concatenate([kept[:, :k - 1], np.zeros((kept.shape[0], 1))], axis=1)
    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    draws = np.concatenate([log_pi, kept[:, k - 1:]], axis=1)
    return PosteriorDraws(draws=draws, acceptance_rate=float(acceptance),
                          low_acceptance=acceptance < 0.01, k=k)


# ---------------------------------------------------------------------------
# Moment extraction
# ---------------------------------------------------------------------------


def sample_moments(draws: PosteriorDraws, n_batches: int = 20) -> SampleMoments:
    """Per-coordinate mean/sd, components relabeled by ascending mean mu.

    The sd's Monte Carlo error comes from batch means: the retained stretch
    is cut into ``n_batches`` consecutive batches and the spread of the
    per-batch sds is scaled by sqrt(n_batches).
    """
    d = draws.draws
    k = draws.k
    if d.shape[0] < 100:
        raise ValueError("need at least 100 retained draws")
    order = np.argsort(d[:, k:2 * k].mean(axis=0), kind="stable")
    cols = np.concatenate([order, k + order, 2 * k + order])
    aligned = d[:, cols]
    mean = aligned.mean(axis=0)
    sd = aligned.std(axis=0, ddof=1)
    batches = np.array_split(aligned, n_batches, axis=0)
    batch_sds = np.array([b.std(axis=0, ddof=1) for b in batches])
    sd_mc_se = batch_sds.std(axis=0, ddof=1) / np.sqrt(n_batches)
    return SampleMoments(mean=mean, sd=sd, sd_mc_se=sd_mc_se, order=order)
