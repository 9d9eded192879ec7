"""Coordinate-ascent mean-field VB for the K-component univariate normal mixture.

The model couples a Dirichlet weight vector, per-component normal means,
per-component gamma precisions, and one categorical indicator per
observation.  A fit is a solution of the fixed-point system m = M(m), where
m stacks every factor's mean parameters (expected sufficient statistics) and
M applies every conjugate update as a function of the *other* factors'
means.  The optimizer sweeps the updates sequentially (z, pi, mu, tau) for
speed, but convergence is always declared on the residual of the
simultaneous map M, because the linear-response correction differentiates
that map and needs a tight fixed point.

Data enters only through per-observation moments (E[x_n], E[x_n^2]); for
observed data these are (x_n, x_n^2), and for the noisy-observation model
they are the pinned variational moments of the latent x_n.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .expfam import (
    DirichletBlock,
    GammaBlock,
    NormalBlock,
    digamma,
    dirichlet_moments,
)

__all__ = [
    "DataMoments",
    "MixturePriors",
    "MixturePosterior",
    "FrozenBlocks",
    "FitOptions",
    "FitResult",
    "FitNumericsError",
    "MeanState",
    "update_z",
    "update_pi",
    "update_mu",
    "update_tau",
    "fit",
    "point_estimates",
    "PointEstimates",
    "component_order",
    "fixed_point_residual",
    "state_from_posterior",
    "parallel_update",
]

# Below this responsibility mass a component's mu/tau updates fall back to
# the exact prior block.
EMPTY_COMPONENT_MASS = 1e-8

LOG_2PI = float(np.log(2.0 * np.pi))


class FitNumericsError(RuntimeError):
    """A NaN/inf appeared in an update; carries the sweep index."""


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataMoments:
    """Per-observation moments E[x_n] and E[x_n^2]."""

    ex: np.ndarray
    ex2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ex", np.asarray(self.ex, dtype=float))
        object.__setattr__(self, "ex2", np.asarray(self.ex2, dtype=float))
        if self.ex.shape != self.ex2.shape or self.ex.ndim != 1:
            raise ValueError("ex and ex2 must be equal-length vectors")
        if np.any(self.ex2 < self.ex**2 - 1e-12):
            raise ValueError("ex2 must dominate ex^2 (variance cannot be negative)")

    @classmethod
    def from_observations(cls, x) -> "DataMoments":
        x = np.asarray(x, dtype=float)
        return cls(ex=x, ex2=x * x)

    @property
    def n(self) -> int:
        return self.ex.size


@dataclass(frozen=True)
class MixturePriors:
    """Symmetric priors: Dirichlet(alpha), Gamma(shape, rate), N(mean, variance)."""

    dirichlet_alpha: float = 1.0
    gamma_shape: float = 2.0001
    gamma_rate: float = 0.1
    normal_mean: float = 0.0
    normal_variance: float = 100.0

    def __post_init__(self):
        for name in ("dirichlet_alpha", "gamma_shape", "gamma_rate", "normal_variance"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class MixturePosterior:
    """The full variational state for one fit."""

    pi: DirichletBlock
    mu: tuple
    tau: tuple
    resp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(self.mu))
        object.__setattr__(self, "tau", tuple(self.tau))
        object.__setattr__(self, "resp", np.asarray(self.resp, dtype=float))
        k = self.pi.k
        if len(self.mu) != k or len(self.tau) != k:
            raise ValueError("pi, mu, tau must agree on the number of components")
        if self.resp.ndim != 2 or self.resp.shape[1] != k:
            raise ValueError("resp must be an N x K matrix")
        rows = self.resp.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > 1e-10:
            raise ValueError("responsibility rows must sum to 1 within 1e-10")

    @property
    def k(self) -> int:
        return self.pi.k

    @property
    def n(self) -> int:
        return self.resp.shape[0]


@dataclass(frozen=True)
class FrozenBlocks:
    """Blocks held at fixed (point-mass) values during a fit."""

    pi: np.ndarray | None = None
    tau: np.ndarray | None = None

    def __post_init__(self):
        if self.pi is not None:
            pi = np.asarray(self.pi, dtype=float)
            if abs(pi.sum() - 1.0) > 1e-10 or np.any(pi <= 0.0):
                raise ValueError("frozen pi must be a strictly positive simplex vector")
            object.__setattr__(self, "pi", pi)
        if self.tau is not None:
            tau = np.asarray(self.tau, dtype=float)
            if np.any(tau <= 0.0):
                raise ValueError("frozen tau must be strictly positive")
            object.__setattr__(self, "tau", tau)


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 10_000
    tolerance: float = 1e-9
    n_restarts: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be strictly positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class FitResult:
    posterior: MixturePosterior
    iterations: int
    final_residual: float
    converged: bool
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PointEstimates:
    """The (E[log pi_k], E[mu_k], E[log tau_k]) coordinates of a posterior."""

    logpi: np.ndarray
    mu: np.ndarray
    logtau: np.ndarray


# ---------------------------------------------------------------------------
# Working state: plain moment arrays, one entry per mean-parameter block
# ---------------------------------------------------------------------------


@dataclass
class MeanState:
    """Moment arrays for one variational state.

    ``logpi`` is E[log pi_k]; ``mu``/``mu2`` are E[mu_k], E[mu_k^2];
    ``tau``/``logtau`` are E[tau_k], E[log tau_k]; ``resp`` is the N x K
    responsibility matrix.  Frozen blocks carry their point-mass values here
    and are simply never rewritten.
    """

    logpi: np.ndarray
    mu: np.ndarray
    mu2: np.ndarray
    tau: np.ndarray
    logtau: np.ndarray
    resp: np.ndarray

    def copy(self) -> "MeanState":
        return MeanState(
            self.logpi.copy(), self.mu.copy(), self.mu2.copy(),
            self.tau.copy(), self.logtau.copy(), self.resp.copy(),
        )


def state_from_posterior(post: MixturePosterior, frozen: FrozenBlocks | None = None) -> MeanState:
    frozen = frozen or FrozenBlocks()
    if frozen.pi is not None:
        logpi = np.log(frozen.pi)
    else:
        logpi = dirichlet_moments(post.pi).mean
    if frozen.tau is not None:
        tau = frozen.tau.copy()
        logtau = np.log(frozen.tau)
    else:
        tau = np.array([b.shape / b.rate for b in post.tau])
        logtau = np.array([digamma(b.shape) - np.log(b.rate) for b in post.tau])
    mu = np.array([b.mean for b in post.mu])
    mu2 = np.array([b.mean**2 + b.variance for b in post.mu])
    return MeanState(logpi, mu, mu2, tau, logtau, post.resp.copy())


# ---------------------------------------------------------------------------
# Update kernels (array level).  Each reads only *other* blocks' moments.
# ---------------------------------------------------------------------------


def _z_logits(data: DataMoments, s: MeanState) -> np.ndarray:
    quad = s.tau[None, :] * (
        data.ex2[:, None] - 2.0 * data.ex[:, None] * s.mu[None, :] + s.mu2[None, :]
    )
    return s.logpi[None, :] + 0.5 * s.logtau[None, :] - 0.5 * LOG_2PI - 0.5 * quad


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=1, keepdims=True)


def _pi_alpha(priors: MixturePriors, resp: np.ndarray) -> np.ndarray:
    return priors.dirichlet_alpha + resp.sum(axis=0)


def _mu_params(priors: MixturePriors, data: DataMoments, resp: np.ndarray,
               tau_mean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mass = resp.sum(axis=0)
    weighted_x = resp.T @ data.ex
    variance = 1.0 / (1.0 / priors.normal_variance + tau_mean * mass)
    mean = variance * (priors.normal_mean / priors.normal_variance + tau_mean * weighted_x)
    empty = mass < EMPTY_COMPONENT_MASS
    if np.any(empty):
        mean = np.where(empty, priors.normal_mean, mean)
        variance = np.where(empty, priors.normal_variance, variance)
    return mean, variance


def _tau_params(priors: MixturePriors, data: DataMoments, resp: np.ndarray,
                mu_mean: np.ndarray, mu2_mean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mass = resp.sum(axis=0)
    # E[(x_n - mu_k)^2] expanded in moments of both factors
    sq = data.ex2[:, None] - 2.0 * data.ex[:, None] * mu_mean[None, :] + mu2_mean[None, :]
    shape = priors.gamma_shape + 0.5 * mass
    rate = priors.gamma_rate + 0.5 * np.einsum("nk,nk->k", resp, sq)
    empty = mass < EMPTY_COMPONENT_MASS
    if np.any(empty):
        shape = np.where(empty, priors.gamma_shape, shape)
        rate = np.where(empty, priors.gamma_rate, rate)
    return shape, rate


# ---------------------------------------------------------------------------
# Public single-block operations on posterior objects
# ---------------------------------------------------------------------------


def update_z(data: DataMoments, post: MixturePosterior) -> np.ndarray:
    """One categorical update: row-normalized responsibilities."""
    s = state_from_posterior(post)
    return _softmax_rows(_z_logits(data, s))


def update_pi(priors: MixturePriors, resp: np.ndarray) -> DirichletBlock:
    """Dirichlet update: alpha_k = alpha0 + sum_n r_nk."""
    return DirichletBlock(_pi_alpha(priors, np.asarray(resp, dtype=float)))


def update_mu(priors: MixturePriors, data: DataMoments, resp: np.ndarray,
              tau_mean: np.ndarray) -> tuple:
    """Normal updates for every component given E[tau_k]."""
    mean, variance = _mu_params(priors, data, np.asarray(resp, dtype=float),
                                np.asarray(tau_mean, dtype=float))
    return tuple(NormalBlock(m, v) for m, v in zip(mean, variance))


def update_tau(priors: MixturePriors, data: DataMoments, resp: np.ndarray,
               mu_mean: np.ndarray, mu2_mean: np.ndarray) -> tuple:
    """Gamma updates for every component given E[mu_k], E[mu_k^2]."""
    shape, rate = _tau_params(priors, data, np.asarray(resp, dtype=float),
                              np.asarray(mu_mean, dtype=float),
                              np.asarray(mu2_mean, dtype=float))
    return tuple(GammaBlock(s, r) for s, r in zip(shape, rate))


# ---------------------------------------------------------------------------
# The simultaneous map M and its residual
# ---------------------------------------------------------------------------


def parallel_update(data: DataMoments, priors: MixturePriors, s: MeanState,
                    frozen: FrozenBlocks | None = None) -> MeanState:
    """Evaluate every block's update as a function of the current state.

    This is the map M whose fixed point defines the solution and whose
    Jacobian the linear-response correction differentiates.  Frozen blocks
    are mapped to themselves.
    """
    frozen = frozen or FrozenBlocks()
    resp = _softmax_rows(_z_logits(data, s))
    if frozen.pi is None:
        alpha = _pi_alpha(priors, s.resp)
        logpi = digamma(alpha) - digamma(alpha.sum())
    else:
        logpi = s.logpi.copy()
    mu_mean, mu_var = _mu_params(priors, data, s.resp, s.tau)
    if frozen.tau is None:
        shape, rate = _tau_params(priors, data, s.resp, s.mu, s.mu2)
        tau = shape / rate
        logtau = digamma(shape) - np.log(rate)
    else:
        tau = s.tau.copy()
        logtau = s.logtau.copy()
    return MeanState(logpi, mu_mean, mu_mean**2 + mu_var, tau, logtau, resp)


def _state_gap(a: MeanState, b: MeanState, frozen: FrozenBlocks) -> float:
    gaps = [
        np.max(np.abs(a.mu - b.mu), initial=0.0),
        np.max(np.abs(a.mu2 - b.mu2), initial=0.0),
        np.max(np.abs(a.resp - b.resp), initial=0.0),
    ]
    if frozen.pi is None:
        gaps.append(np.max(np.abs(a.logpi - b.logpi), initial=0.0))
    if frozen.tau is None:
        gaps.append(np.max(np.abs(a.tau - b.tau), initial=0.0))
        gaps.append(np.max(np.abs(a.logtau - b.logtau), initial=0.0))
    return max(gaps)


def fixed_point_residual(data: DataMoments, priors: MixturePriors,
                         post_or_state, frozen: FrozenBlocks | None = None) -> float:
    """Sup-norm of M(m) - m over the live (non-frozen) mean coordinates."""
    frozen = frozen or FrozenBlocks()
    s = post_or_state
    if isinstance(s, MixturePosterior):
        s = state_from_posterior(s, frozen)
    return _state_gap(parallel_update(data, priors, s, frozen), s, frozen)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _quantile_split_resp(data: DataMoments, k: int) -> np.ndarray:
    """Deterministic initialization: sort, cut into K groups, smooth one-hots."""
    n = data.n
    resp = np.zeros((n, k))
    order = np.argsort(data.ex, kind="stable")
    for g, idx in enumerate(np.array_split(order, k)):
        resp[idx, g] = 1.0
    return 0.9 * resp + 0.1 / k


def _perturb_resp(resp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noise = rng.dirichlet(np.full(resp.shape[1], 5.0), size=resp.shape[0])
    return 0.7 * resp + 0.3 * noise


def _bootstrap_state(data: DataMoments, priors: MixturePriors, resp: np.ndarray,
                     frozen: FrozenBlocks) -> MeanState:
    """Build a full state from initial responsibilities (pi, mu, tau pass)."""
    k = resp.shape[1]
    if frozen.pi is not None:
        logpi = np.log(frozen.pi)
    else:
        alpha = _pi_alpha(priors, resp)
        logpi = digamma(alpha) - digamma(alpha.sum())
    if frozen.tau is not None:
        tau = frozen.tau.copy()
        logtau = np.log(frozen.tau)
        prior_tau = tau
    else:
        prior_tau = np.full(k, priors.gamma_shape / priors.gamma_rate)
    mu_mean, mu_var = _mu_params(priors, data, resp, prior_tau)
    if frozen.tau is None:
        shape, rate = _tau_params(priors, data, resp, mu_mean, mu_mean**2 + mu_var)
        tau = shape / rate
        logtau = digamma(shape) - np.log(rate)
    return MeanState(logpi, mu_mean, mu_mean**2 + mu_var, tau, logtau, resp.copy())


def _sweep(data: DataMoments, priors: MixturePriors, s: MeanState,
           frozen: FrozenBlocks):
    """One sequential coordinate sweep in the fixed order z, pi, mu, tau.

    Returns the new state together with the natural parameters that produced
    it, so a converged state can be materialized into blocks bit-exactly.
    """
    resp = _softmax_rows(_z_logits(data, s))
    alpha = None
    if frozen.pi is None:
        alpha = _pi_alpha(priors, resp)
        logpi = digamma(alpha) - digamma(alpha.sum())
    else:
        logpi = s.logpi
    mu_mean, mu_var = _mu_params(priors, data, resp, s.tau)
    mu2 = mu_mean**2 + mu_var
    shape = rate = None
    if frozen.tau is None:
        shape, rate = _tau_params(priors, data, resp, mu_mean, mu2)
        tau = shape / rate
        logtau = digamma(shape) - np.log(rate)
    else:
        tau = s.tau
        logtau = s.logtau
    state = MeanState(logpi.copy(), mu_mean, mu2, tau.copy(), logtau.copy(), resp)
    return state, (alpha, mu_mean, mu_var, shape, rate)


def _check_finite(s: MeanState, iteration: int):
    for arr in (s.logpi, s.mu, s.mu2, s.tau, s.logtau, s.resp):
        if not np.all(np.isfinite(arr)):
            raise FitNumericsError(
                f"non-finite value in variational update at iteration {iteration}"
            )


def _diag_objective(data: DataMoments, priors: MixturePriors, s: MeanState,
                    frozen: FrozenBlocks) -> float:
    """Sum of per-block log-normalizers; restart tie-break diagnostic only."""
    total = 0.0
    if frozen.pi is None:
        alpha = _pi_alpha(priors, s.resp)
        total += float(gammaln(alpha).sum() - gammaln(alpha.sum()))
    mu_mean, mu_var = _mu_params(priors, data, s.resp, s.tau)
    total += float(np.sum(mu_mean**2 / (2.0 * mu_var) + 0.5 * np.log(2.0 * np.pi * mu_var)))
    if frozen.tau is None:
        shape, rate = _tau_params(priors, data, s.resp, s.mu, s.mu2)
        total += float(np.sum(gammaln(shape) - shape * np.log(rate)))
    total += float(logsumexp(_z_logits(data, s), axis=1).sum())
    return total


def _materialize(priors: MixturePriors, s: MeanState, nat,
                 frozen: FrozenBlocks, init: MixturePosterior | None) -> MixturePosterior:
    """Turn the final sweep's natural parameters into posterior blocks.

    Frozen blocks keep their incoming values untouched (bit-identical across
    the fit); with no incoming posterior they default to the prior blocks.
    """
    k = s.resp.shape[1]
    alpha, mu_mean, mu_var, shape, rate = nat
    if frozen.pi is None:
        pi = DirichletBlock(alpha)
    elif init is not None:
        pi = init.pi
    else:
        pi = DirichletBlock(np.full(k, priors.dirichlet_alpha))
    mu = tuple(NormalBlock(m, v) for m, v in zip(mu_mean, mu_var))
    if frozen.tau is None:
        tau = tuple(GammaBlock(a, b) for a, b in zip(shape, rate))
    elif init is not None:
        tau = init.tau
    else:
        tau = tuple(GammaBlock(priors.gamma_shape, priors.gamma_rate) for _ in range(k))
    return MixturePosterior(pi=pi, mu=mu, tau=tau, resp=s.resp.copy())


def _run_single(data: DataMoments, priors: MixturePriors, opts: FitOptions,
                frozen: FrozenBlocks, start: MeanState):
    s = start
    nat = None
    iterations = 0
    converged = False
    residual = np.inf
    for iteration in range(1, opts.max_iterations + 1):
        new, nat = _sweep(data, priors, s, frozen)
        _check_finite(new, iteration)
        delta = _state_gap(new, s, frozen)
        s = new
        iterations = iteration
        if delta < opts.tolerance:
            residual = fixed_point_residual(data, priors, s, frozen)
            if residual <= opts.tolerance:
                converged = True
                break
    if not converged:
        residual = fixed_point_residual(data, priors, s, frozen)
        converged = residual <= opts.tolerance
    return s, nat, iterations, residual, converged


def fit(data: DataMoments, priors: MixturePriors, k: int,
        opts: FitOptions = FitOptions(), frozen: FrozenBlocks | None = None,
        init: MixturePosterior | None = None) -> FitResult:
    """Fit the mixture posterior, returning the best restart.

    ``init`` warm-starts from an existing posterior and skips restarts (used
    for perturb-and-refit loops).  Otherwise the base run starts from a
    seeded quantile split of the data and ``opts.n_restarts`` extra runs
    perturb it with Dirichlet(5) row noise.  Restarts are ranked converged
    first (a residual at tolerance is a tie), then by the diagnostic
    objective, then by restart index.
    """
    if data.n < 1 or k < 1:
        raise ValueError("need N >= 1 observations and K >= 1 components")
    frozen = frozen or FrozenBlocks()
    if frozen.pi is not None and frozen.pi.size != k:
        raise ValueError("frozen pi length must equal k")
    if frozen.tau is not None and frozen.tau.size != k:
        raise ValueError("frozen tau length must equal k")

    if init is not None:
        starts = [state_from_posterior(init, frozen)]
    else:
        rng = np.random.default_rng(opts.seed)
        base = _quantile_split_resp(data, k)
        resps = [base] + [_perturb_resp(base, rng) for _ in range(opts.n_restarts)]
        starts = [_bootstrap_state(data, priors, r, frozen) for r in resps]

    runs = []
    for index, start in enumerate(starts):
        s, nat, iterations, residual, converged = _run_single(data, priors, opts, frozen, start)
        objective = _diag_objective(data, priors, s, frozen)
        runs.append((index, s, nat, iterations, residual, converged, objective))

    def rank(run):
        index, _, _, _, residual, converged, objective = run
        return (0.0 if converged else residual, -objective, index)

    index, s, nat, iterations, residual, converged, objective = min(runs, key=rank)
    mass = s.resp.sum(axis=0)
    diagnostics = {
        "restart": index,
        "objective": objective,
        "empty_components": [int(j) for j in np.nonzero(mass < EMPTY_COMPONENT_MASS)[0]],
        "restart_residuals": [float(r[4]) for r in runs],
    }
    posterior = _materialize(priors, s, nat, frozen, init)
    return FitResult(posterior=posterior, iterations=iterations,
                     final_residual=float(residual), converged=converged,
                     diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Reporting helpers
# ---------------------------------------------------------------------------


def point_estimates(post: MixturePosterior) -> PointEstimates:
    """The (E[log pi_k], E[mu_k], E[log tau_k]) coordinates, in block order."""
    logpi = dirichlet_moments(post.pi).mean
    mu = np.array([b.mean for b in post.mu])
    logtau = np.array([digamma(b.shape) - np.log(b.rate) for b in post.tau])
    return PointEstimates(logpi=logpi, mu=mu, logtau=logtau)


def component_order(post: MixturePosterior) -> np.ndarray:
    """Permutation sorting components by E[mu_k] ascending (reporting only)."""
    return np.argsort([b.mean for b in post.mu], kind="stable")
