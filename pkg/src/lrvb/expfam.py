"""Exponential-family primitives for the four block families used by the models.

Each variational factor is one of Dirichlet / Gamma / Normal / Categorical.
For every family we expose its mean parameters (expected sufficient
statistics) and the covariance of the sufficient statistics, since those two
objects are all the downstream fixed-point and linear-response machinery
needs.

Parameter conventions (documented because the literature is ambiguous):

* ``GammaBlock(shape, rate)`` -- shape-rate, so E[tau] = shape / rate.  Under
  this convention the conjugate precision update is additive in the data.
* ``NormalBlock(mean, variance)`` -- mean-variance, matching the standard
  conjugate-update form.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DirichletBlock",
    "GammaBlock",
    "NormalBlock",
    "CategoricalBlock",
    "FamilyMoments",
    "digamma",
    "trigamma",
    "dirichlet_moments",
    "gamma_moments",
    "normal_moments",
    "categorical_moments",
    "softmax_from_logits",
]


# ---------------------------------------------------------------------------
# psi and psi' -- recurrence shift plus asymptotic series, ~1e-13 relative.
# ---------------------------------------------------------------------------

# B_{2n}/(2n) for the digamma tail, n = 1..10.
_DIGAMMA_TAIL = np.array([
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
    43867.0 / 14364.0,
    -174611.0 / 6600.0,
])

# B_{2n} for the trigamma tail, n = 1..11.
_TRIGAMMA_TAIL = np.array([
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
    -174611.0 / 330.0,
    854513.0 / 138.0,
])

_SHIFT_POINT = 6.0


def digamma(x):
    """psi(x) for x > 0, elementwise."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise ValueError("digamma requires strictly positive arguments")
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    out = np.zeros_like(x)
    # shift every argument up to >= _SHIFT_POINT via psi(x) = psi(x+1) - 1/x
    small = x < _SHIFT_POINT
    while np.any(small):
        out[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _SHIFT_POINT
    inv2 = 1.0 / (x * x)
    tail = np.zeros_like(x)
    power = inv2.copy()
    for c in _DIGAMMA_TAIL:
        tail += c * power
        power *= inv2
    out += np.log(x) - 0.5 / x - tail
    return float(out[0]) if scalar else out


def trigamma(x):
    """psi'(x) for x > 0, elementwise."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise ValueError("trigamma requires strictly positive arguments")
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    out = np.zeros_like(x)
    small = x < _SHIFT_POINT
    while np.any(small):
        out += np.where(small, 1.0 / (x * x), 0.0)
        x = np.where(small, x + 1.0, x)
        small = x < _SHIFT_POINT
    inv = 1.0 / x
    inv2 = inv * inv
    tail = np.zeros_like(x)
    power = inv * inv2
    for c in _TRIGAMMA_TAIL:
        tail += c * power
        power *= inv2
    out += inv + 0.5 * inv2 + tail
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Block types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DirichletBlock:
    """Dirichlet factor over a probability simplex; sufficient stats log pi_k."""

    alpha: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        if self.alpha.ndim != 1 or self.alpha.size < 1:
            raise ValueError("alpha must be a vector with K >= 1 entries")
        if np.any(self.alpha <= 0.0) or not np.all(np.isfinite(self.alpha)):
            raise ValueError("Dirichlet concentrations must be strictly positive")

    @property
    def k(self) -> int:
        return self.alpha.size


@dataclass(frozen=True)
class GammaBlock:
    """Gamma factor in shape-rate form; sufficient stats (tau, log tau)."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0.0 and np.isfinite(self.shape)):
            raise ValueError("Gamma shape must be strictly positive")
        if not (self.rate > 0.0 and np.isfinite(self.rate)):
            raise ValueError("Gamma rate must be strictly positive")


@dataclass(frozen=True)
class NormalBlock:
    """Normal factor in mean-variance form; sufficient stats (theta, theta^2)."""

    mean: float
    variance: float

    def __post_init__(self):
        if not (self.variance > 0.0 and np.isfinite(self.variance)):
            raise ValueError("Normal variance must be strictly positive")
        if not np.isfinite(self.mean):
            raise ValueError("Normal mean must be finite")


@dataclass(frozen=True)
class CategoricalBlock:
    """Categorical factor over K states, kept as logits plus normalized probs.

    The logits carry an additive-constant gauge; they are only ever consumed
    through ``softmax_from_logits``, so the gauge never leaks downstream.
    """

    logits: np.ndarray
    probs: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=float))
        probs = self.probs
        if probs is None:
            probs = softmax_from_logits(self.logits)
        probs = np.asarray(probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if probs.shape != self.logits.shape:
            raise ValueError("probs and logits must have matching shape")
        if abs(probs.sum() - 1.0) > 1e-12 or np.any(probs < 0.0):
            raise ValueError("probs must lie on the simplex (sum 1 within 1e-12)")


@dataclass(frozen=True)
class FamilyMoments:
    """Mean parameters of a block and the covariance of its sufficient stats."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("cov must be square and match mean's length")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-12:
            raise ValueError("cov must be symmetric within 1e-12")


# ---------------------------------------------------------------------------
# Moment maps
# ---------------------------------------------------------------------------


def dirichlet_moments(block: DirichletBlock) -> FamilyMoments:
    """E[log pi] and Cov(log pi) under Dirichlet(alpha).

    mean_k = psi(alpha_k) - psi(alpha_0) and
    cov_jk = psi'(alpha_j) delta_jk - psi'(alpha_0), with alpha_0 = sum(alpha).
    """
    alpha = block.alpha
    total = alpha.sum()
    mean = digamma(alpha) - digamma(total)
    cov = np.diag(trigamma(alpha)) - trigamma(total)
    return FamilyMoments(mean=mean, cov=cov)


def gamma_moments(block: GammaBlock) -> FamilyMoments:
    """Moments of (tau, log tau) under Gamma(shape, rate)."""
    a, b = block.shape, block.rate
    mean = np.array([a / b, digamma(a) - np.log(b)])
    cov = np.array([[a / b**2, 1.0 / b], [1.0 / b, trigamma(a)]])
    return FamilyMoments(mean=mean, cov=cov)


def normal_moments(block: NormalBlock) -> FamilyMoments:
    """Moments of (theta, theta^2) under N(mean, variance).

    Cov(theta, theta^2) = 2 m v and Var(theta^2) = 4 m^2 v + 2 v^2.
    """
    m, v = block.mean, block.variance
    mean = np.array([m, m * m + v])
    cov = np.array([[v, 2.0 * m * v], [2.0 * m * v, 4.0 * m * m * v + 2.0 * v * v]])
    return FamilyMoments(mean=mean, cov=cov)


def categorical_moments(block: CategoricalBlock) -> FamilyMoments:
    """Indicator moments: mean = probs, cov = diag(r) - r r^T (singular)."""
    r = block.probs
    return FamilyMoments(mean=r.copy(), cov=np.diag(r) - np.outer(r, r))


def softmax_from_logits(logits) -> np.ndarray:
    """Max-shifted softmax; invariant to adding a shared constant."""
    logits = np.asarray(logits, dtype=float)
    top = np.max(logits)
    if not np.isfinite(top):
        raise ValueError("softmax requires at least one finite logit")
    w = np.exp(logits - top)
    return w / w.sum()
