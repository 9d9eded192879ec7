"""Linear-response covariance correction around a converged mean-field fit.

The stacked mean vector m concatenates every factor's expected sufficient
statistics.  A converged fit satisfies m = M(m) for the simultaneous update
map M, and the corrected posterior covariance is

    sigma_hat = (I - R)^{-1} sigma_q,      R = dM/dm^T,

with sigma_q the block-diagonal covariance under the factorized posterior.
Each R block factors as (covariance of the output block) times (derivative
of that block's natural parameter with respect to the input block's means),
which this module assembles in closed form from the explicit conjugate
updates.  The indicator block never reads other indicators, so R_zz = 0 and
the z block can be eliminated with one Schur product, leaving a dense solve
whose size is only the theta block.

A finite-difference verifier for R ships as a diagnostic so new frozen-block
configurations can be validated against the same update map the fit uses.
"""

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .expfam import (
    DirichletBlock,
    GammaBlock,
    NormalBlock,
    dirichlet_moments,
    gamma_moments,
    normal_moments,
)
from .mixture import (
    DataMoments,
    FrozenBlocks,
    MeanState,
    MixturePosterior,
    MixturePriors,
    EMPTY_COMPONENT_MASS,
    _mu_params,
    _pi_alpha,
    _softmax_rows,
    _tau_params,
    _z_logits,
    fixed_point_residual,
    parallel_update,
    state_from_posterior,
)

__all__ = [
    "MeanLayout",
    "build_layout",
    "BlockDiag",
    "JacobianBlocks",
    "LrvbEstimate",
    "MvnTarget",
    "MvnFitResult",
    "NotAtFixedPointError",
    "IllConditionedError",
    "assemble_sigma_q",
    "jacobian_M",
    "dense_jacobian",
    "lrvb_covariance",
    "lrvb_covariance_dense",
    "corrected_solve",
    "mean_vector",
    "update_map",
    "verify_jacobian",
    "JacobianCheck",
    "mvn_mfvb_fit",
    "mvn_lrvb_check",
]

CONDITION_LIMIT = 1e12


class NotAtFixedPointError(ValueError):
    """The posterior handed to the Jacobian is not a tight enough fixed point."""


class IllConditionedError(RuntimeError):
    """(I - R) is numerically singular; the fixed point is not isolated."""

    def __init__(self, condition: float, context: str = ""):
        self.condition = condition
        where = f" in {context}" if context else ""
        super().__init__(
            f"linear-response system{where} has condition estimate {condition:.3e} "
            f"(limit {CONDITION_LIMIT:.0e}); covariance estimate would be meaningless"
        )


# ---------------------------------------------------------------------------
# Coordinate layout of the stacked mean vector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeanLayout:
    """Index map of the stacked mean vector.

    Coordinate order: theta block first, then indicators row-major, then
    (for the noisy-data model) per-observation (x_n, x_n^2) pairs.  For the
    plain mixture the theta block is [log pi_1..K | (mu_k, mu_k^2) pairs |
    (tau_k, log tau_k) pairs]; for the leverage model it is the (mu_k,
    mu_k^2) pairs only, pi and tau being frozen out of the system.
    """

    model: str
    k: int
    n: int
    theta_dim: int
    z_dim: int
    x_dim: int

    @property
    def dim(self) -> int:
        return self.theta_dim + self.z_dim + self.x_dim

    @property
    def has_pi_tau(self) -> bool:
        return self.model == "mixture"

    # -- theta coordinates ---------------------------------------------------

    def logpi_index(self, k: int) -> int:
        if not self.has_pi_tau:
            raise ValueError("log pi is not part of this layout")
        return k

    def mu_index(self, k: int) -> int:
        base = self.k if self.has_pi_tau else 0
        return base + 2 * k

    def mu2_index(self, k: int) -> int:
        return self.mu_index(k) + 1

    def tau_index(self, k: int) -> int:
        if not self.has_pi_tau:
            raise ValueError("tau is not part of this layout")
        return 3 * self.k + 2 * k

    def logtau_index(self, k: int) -> int:
        return self.tau_index(k) + 1

    # -- z and x coordinates ---------------------------------------------------

    def z_index(self, n: int, k: int) -> int:
        return self.theta_dim + n * self.k + k

    def x_index(self, n: int) -> int:
        if self.x_dim == 0:
            raise ValueError("x is not part of this layout")
        return self.theta_dim + self.z_dim + 2 * n

    def x2_index(self, n: int) -> int:
        return self.x_index(n) + 1

    @property
    def theta_slice(self) -> slice:
        return slice(0, self.theta_dim)

    @property
    def z_slice(self) -> slice:
        return slice(self.theta_dim, self.theta_dim + self.z_dim)

    @property
    def x_slice(self) -> slice:
        return slice(self.theta_dim + self.z_dim, self.dim)

    def theta_labels(self) -> list[str]:
        labels = []
        if self.has_pi_tau:
            labels += [f"logpi_{k + 1}" for k in range(self.k)]
        for k in range(self.k):
            labels += [f"mu_{k + 1}", f"mu2_{k + 1}"]
        if self.has_pi_tau:
            for k in range(self.k):
                labels += [f"tau_{k + 1}", f"logtau_{k + 1}"]
        return labels

    def labels(self) -> list[str]:
        labels = self.theta_labels()
        labels += [f"z_{n + 1}_{k + 1}" for n in range(self.n) for k in range(self.k)]
        if self.x_dim:
            labels += [lab for n in range(self.n)
                       for lab in (f"x_{n + 1}", f"x2_{n + 1}")]
        return labels


def build_layout(k: int, n: int, model: str = "mixture") -> MeanLayout:
    """Lay out the stacked mean vector for one of the two supported models."""
    if k < 1 or n < 1:
        raise ValueError("need K >= 1 and N >= 1")
    if model == "mixture":
        return MeanLayout(model=model, k=k, n=n, theta_dim=5 * k, z_dim=n * k, x_dim=0)
    if model == "mixture_leverage":
        return MeanLayout(model=model, k=k, n=n, theta_dim=2 * k, z_dim=n * k, x_dim=2 * n)
    raise ValueError(f"unknown layout model {model!r}")


# ---------------------------------------------------------------------------
# Block-diagonal covariance under q*
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockDiag:
    """Block-diagonal matrix stored as (offset, square block) pairs."""

    dim: int
    blocks: tuple

    def dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        for offset, block in self.blocks:
            d = block.shape[0]
            out[offset:offset + d, offset:offset + d] = block
        return out

    def sub_dense(self, start: int, stop: int) -> np.ndarray:
        """Dense slice [start:stop) x [start:stop); blocks must not straddle it."""
        out = np.zeros((stop - start, stop - start))
        for offset, block in self.blocks:
            d = block.shape[0]
            if offset >= stop or offset + d <= start:
                continue
            if offset < start or offset + d > stop:
                raise ValueError("requested slice cuts through a block")
            out[offset - start:offset - start + d, offset - start:offset - start + d] = block
        return out

    def diagonal(self) -> np.ndarray:
        out = np.zeros(self.dim)
        for offset, block in self.blocks:
            d = block.shape[0]
            out[offset:offset + d] = np.diag(block)
        return out


def assemble_sigma_q(post: MixturePosterior, layout: MeanLayout,
                     x_blocks=None) -> BlockDiag:
    """Per-factor covariance blocks in layout order.

    ``x_blocks`` supplies the per-observation 2x2 covariance of (x_n, x_n^2)
    for the noisy-data model; omitted (the analytic limit) they are zero.
    """
    blocks = []
    if layout.has_pi_tau:
        blocks.append((layout.logpi_index(0), dirichlet_moments(post.pi).cov))
    for k in range(layout.k):
        blocks.append((layout.mu_index(k), normal_moments(post.mu[k]).cov))
    if layout.has_pi_tau:
        for k in range(layout.k):
            blocks.append((layout.tau_index(k), gamma_moments(post.tau[k]).cov))
    resp = post.resp
    for n in range(layout.n):
        cov = np.diag(resp[n]) - np.outer(resp[n], resp[n])
        blocks.append((layout.z_index(n, 0), cov))
    if layout.x_dim:
        for n in range(layout.n):
            block = np.zeros((2, 2)) if x_blocks is None else np.asarray(x_blocks[n], dtype=float)
            blocks.append((layout.x_index(n), block))
    return BlockDiag(dim=layout.dim, blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# Analytic Jacobian of the update map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JacobianBlocks:
    """Partitioned R = dM/dm^T.  R_zz and R_xx are identically zero.

    The x-row blocks (``r_xt``, ``r_xz``) are populated only for the
    finite-noise validation path; in the analytic limit the x block is
    pinned, so those rows vanish.
    """

    layout: MeanLayout
    r_tt: np.ndarray
    r_tz: np.ndarray
    r_zt: np.ndarray
    r_tx: np.ndarray | None = None
    r_zx: np.ndarray | None = None
    r_xt: np.ndarray | None = None
    r_xz: np.ndarray | None = None


def _theta_moment_arrays(s: MeanState):
    return s.logpi, s.mu, s.mu2, s.tau, s.logtau


def jacobian_M(post: MixturePosterior, data: DataMoments, priors: MixturePriors,
               layout: MeanLayout, frozen: FrozenBlocks | None = None,
               tol: float = 1e-9, x_rows_sigma2: float | None = None) -> JacobianBlocks:
    """Assemble R = dM/dm^T analytically at a converged fit.

    Every block is (output-factor covariance) @ (d natural parameter / d
    input means), chained through the explicit update formulas.  Requires
    the fixed-point residual to be at most ``10 * tol``.

    ``x_rows_sigma2`` switches on the x-row blocks for the finite-noise
    model with that observation variance.
    """
    frozen = frozen or FrozenBlocks()
    if layout.model == "mixture" and (frozen.pi is not None or frozen.tau is not None):
        raise ValueError("the mixture layout has no frozen blocks")
    if layout.model == "mixture_leverage" and (frozen.pi is None or frozen.tau is None):
        raise ValueError("the leverage layout requires frozen pi and tau")

    residual = fixed_point_residual(data, priors, post, frozen)
    if residual > 10.0 * tol:
        raise NotAtFixedPointError(
            f"fixed-point residual {residual:.3e} exceeds 10 * tol = {10.0 * tol:.3e}"
        )

    s = state_from_posterior(post, frozen)
    logpi, u, w, t, l = _theta_moment_arrays(s)
    resp = s.resp
    a, b = data.ex, data.ex2
    n_obs, k_comp = resp.shape
    T, Z, X = layout.theta_dim, layout.z_dim, layout.x_dim

    mass = resp.sum(axis=0)
    weighted_x = resp.T @ a
    live = mass >= EMPTY_COMPONENT_MASS  # empty components update to constants

    # Each dM_j/dm factors as Cov(q_j at the *updated* natural parameter)
    # times d eta_j / dm.  Evaluating the covariances at the one-step update
    # (rather than the stored blocks) keeps tiny entries relatively accurate
    # when the fixed point is tight but not exact.
    mu_mean, mu_var = _mu_params(priors, data, resp, t)
    sig_mu = [normal_moments(NormalBlock(m_, v_)).cov for m_, v_ in zip(mu_mean, mu_var)]
    if layout.has_pi_tau:
        sig_pi = dirichlet_moments(DirichletBlock(_pi_alpha(priors, resp))).cov
        shape, rate = _tau_params(priors, data, resp, u, w)
        sig_tau = [gamma_moments(GammaBlock(a_, b_)).cov for a_, b_ in zip(shape, rate)]
    # indicator covariances from the updated responsibilities, all n at once
    resp_out = _softmax_rows(_z_logits(data, s))
    sig_z = -resp_out[:, :, None] * resp_out[:, None, :]
    diag_idx = np.arange(k_comp)
    sig_z[:, diag_idx, diag_idx] += resp_out

    # squared-deviation moments E[(x_n - mu_k)^2], used by tau and z updates
    sq = b[:, None] - 2.0 * a[:, None] * u[None, :] + w[None, :]

    r_tt = np.zeros((T, T))
    r_tz = np.zeros((T, n_obs, k_comp))
    r_zt = np.zeros((n_obs, k_comp, T))

    mu_rows = np.array([layout.mu_index(k) for k in range(k_comp)])

    if layout.has_pi_tau:
        # pi rows: alpha_k = alpha0 + sum_n r_nk, so d(logpi)/dr_n = sig_pi for every n
        r_tz[:k_comp, :, :] = sig_pi[:, None, :]
        tau_rows = np.array([layout.tau_index(k) for k in range(k_comp)])

    for k in range(k_comp):
        if not live[k]:
            continue
        mr = mu_rows[k]
        # mu_k natural parameter: eta = (m0/v0 + t_k sum r a, -(1/v0 + t_k S_k)/2)
        deta_mu_dz = np.vstack([t[k] * a, np.full(n_obs, -0.5 * t[k])])  # (2, N)
        r_tz[mr:mr + 2, :, k] += sig_mu[k] @ deta_mu_dz
        if layout.has_pi_tau:
            tr = tau_rows[k]
            deta_mu_dtau = np.array([[weighted_x[k], 0.0], [-0.5 * mass[k], 0.0]])
            r_tt[mr:mr + 2, tr:tr + 2] += sig_mu[k] @ deta_mu_dtau
            # tau_k natural parameter: eta = (-(b0 + sum r sq / 2), a0 - 1 + S_k/2)
            deta_tau_dmu = np.array([[weighted_x[k], -0.5 * mass[k]], [0.0, 0.0]])
            r_tt[tr:tr + 2, mr:mr + 2] += sig_tau[k] @ deta_tau_dmu
            deta_tau_dz = np.vstack([-0.5 * sq[:, k], np.full(n_obs, 0.5)])
            r_tz[tr:tr + 2, :, k] += sig_tau[k] @ deta_tau_dz

    # z rows: logits g_nk = logpi_k + logtau_k/2 - log(2 pi)/2 - t_k sq_nk / 2
    if layout.has_pi_tau:
        r_zt[:, :, :k_comp] += sig_z  # dg_n/dlogpi^T = I
    for k in range(k_comp):
        mr = mu_rows[k]
        dg_dmu = np.column_stack([t[k] * a, np.full(n_obs, -0.5 * t[k])])  # (N, 2)
        r_zt[:, :, mr:mr + 2] += sig_z[:, :, k, None] * dg_dmu[:, None, :]
        if layout.has_pi_tau:
            tr = tau_rows[k]
            dg_dtau = np.column_stack([-0.5 * sq[:, k], np.full(n_obs, 0.5)])
            r_zt[:, :, tr:tr + 2] += sig_z[:, :, k, None] * dg_dtau[:, None, :]

    jac = {"r_tt": r_tt, "r_tz": r_tz.reshape(T, Z), "r_zt": r_zt.reshape(Z, T)}

    if X:
        r_tx = np.zeros((T, n_obs, 2))
        for k in range(k_comp):
            if live[k]:
                mr = mu_rows[k]
                r_tx[mr:mr + 2, :, 0] += np.outer(sig_mu[k][:, 0], t[k] * resp[:, k])
        # dg_n/d(a_n, b_n): row k is (t_k u_k, -t_k/2); z_n reads only its own x_n
        dg_dx = np.column_stack([t * u, -0.5 * t])  # (K, 2)
        r_zx_blocks = np.einsum("nij,jc->nic", sig_z, dg_dx)
        r_zx = np.zeros((n_obs, k_comp, n_obs, 2))
        rng = np.arange(n_obs)
        r_zx[rng, :, rng, :] = r_zx_blocks
        jac["r_tx"] = r_tx.reshape(T, X)
        jac["r_zx"] = r_zx.reshape(Z, X)

        if x_rows_sigma2 is not None and x_rows_sigma2 > 0.0:
            # finite-noise x updates: precision 1/sigma2 + sum_k r_nk t_k
            prec = 1.0 / x_rows_sigma2 + resp @ t
            var_x = 1.0 / prec
            sig_x = [normal_moments(NormalBlock(a[n], var_x[n])).cov for n in range(n_obs)]
            r_xt = np.zeros((n_obs, 2, T))
            r_xz = np.zeros((n_obs, 2, n_obs, k_comp))
            for n in range(n_obs):
                deta_x_dz = np.vstack([t * u, -0.5 * t])  # (2, K)
                r_xz[n, :, n, :] = sig_x[n] @ deta_x_dz
                for k in range(k_comp):
                    mr = mu_rows[k]
                    deta_x_dmu = np.array([[resp[n, k] * t[k], 0.0], [0.0, 0.0]])
                    r_xt[n, :, mr:mr + 2] = sig_x[n] @ deta_x_dmu
            jac["r_xt"] = r_xt.reshape(X, T)
            jac["r_xz"] = r_xz.reshape(X, Z)

    return JacobianBlocks(layout=layout, **jac)


def dense_jacobian(jac: JacobianBlocks) -> np.ndarray:
    """Materialize the full D x D Jacobian (diagnostics and small problems)."""
    lay = jac.layout
    out = np.zeros((lay.dim, lay.dim))
    ts, zs, xs = lay.theta_slice, lay.z_slice, lay.x_slice
    out[ts, ts] = jac.r_tt
    out[ts, zs] = jac.r_tz
    out[zs, ts] = jac.r_zt
    if lay.x_dim:
        out[ts, xs] = jac.r_tx
        out[zs, xs] = jac.r_zx
        if jac.r_xt is not None:
            out[xs, ts] = jac.r_xt
            out[xs, zs] = jac.r_xz
    return out


# ---------------------------------------------------------------------------
# The correction itself
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LrvbEstimate:
    sigma_q: BlockDiag
    r: JacobianBlocks
    sigma_hat_theta: np.ndarray
    asymmetry: float
    condition: float


def corrected_solve(system: np.ndarray, rhs: np.ndarray, context: str = "") -> np.ndarray:
    """Solve system @ X = rhs after a conditioning guard; never inverts."""
    condition = float(np.linalg.cond(system))
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise IllConditionedError(condition, context)
    return np.linalg.solve(system, rhs)


def lrvb_covariance(sigma_q: BlockDiag, jac: JacobianBlocks,
                    layout: MeanLayout) -> LrvbEstimate:
    """Corrected theta covariance with the indicator block Schur-eliminated.

    Because R_zz = 0, eliminating z costs one matrix product:
    sigma_hat = (I - R_tt - R_tz R_zt)^{-1} V_theta.
    """
    v_theta = sigma_q.sub_dense(0, layout.theta_dim)
    system = np.eye(layout.theta_dim) - jac.r_tt - jac.r_tz @ jac.r_zt
    condition = float(np.linalg.cond(system))
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise IllConditionedError(condition, "theta covariance solve")
    sigma_hat = np.linalg.solve(system, v_theta)
    denom = np.linalg.norm(sigma_hat)
    asymmetry = float(np.linalg.norm(sigma_hat - sigma_hat.T) / denom) if denom else 0.0
    sigma_hat = 0.5 * (sigma_hat + sigma_hat.T)
    return LrvbEstimate(sigma_q=sigma_q, r=jac, sigma_hat_theta=sigma_hat,
                        asymmetry=asymmetry, condition=condition)


def lrvb_covariance_dense(sigma_q: BlockDiag, jac: JacobianBlocks,
                          layout: MeanLayout) -> np.ndarray:
    """Full-matrix (I - R)^{-1} sigma_q solve, theta corner returned.

    Diagnostic cross-check of the Schur elimination; only sensible for small
    stacked dimensions.
    """
    full = np.eye(layout.dim) - dense_jacobian(jac)
    sigma_hat = corrected_solve(full, sigma_q.dense(), "dense covariance solve")
    ts = layout.theta_slice
    return sigma_hat[ts, ts]


# ---------------------------------------------------------------------------
# Packed update map and finite-difference verification
# ---------------------------------------------------------------------------


def mean_vector(post: MixturePosterior, layout: MeanLayout,
                data: DataMoments | None = None,
                frozen: FrozenBlocks | None = None) -> np.ndarray:
    """Pack a posterior (plus pinned x moments) into layout order."""
    s = state_from_posterior(post, frozen)
    m = np.empty(layout.dim)
    if layout.has_pi_tau:
        m[:layout.k] = s.logpi
    for k in range(layout.k):
        m[layout.mu_index(k)] = s.mu[k]
        m[layout.mu2_index(k)] = s.mu2[k]
        if layout.has_pi_tau:
            m[layout.tau_index(k)] = s.tau[k]
            m[layout.logtau_index(k)] = s.logtau[k]
    m[layout.z_slice] = s.resp.ravel()
    if layout.x_dim:
        if data is None:
            raise ValueError("x coordinates need data moments")
        x = np.empty(layout.x_dim)
        x[0::2] = data.ex
        x[1::2] = data.ex2
        m[layout.x_slice] = x
    return m


def update_map(m: np.ndarray, layout: MeanLayout, data: DataMoments,
               priors: MixturePriors, frozen: FrozenBlocks | None = None) -> np.ndarray:
    """Evaluate the simultaneous map M on a packed mean vector.

    For the leverage layout the x coordinates of the input feed the theta
    and z updates, while the x coordinates of the output stay pinned at the
    observed moments (their update has no free parameters in the analytic
    noise-to-zero limit).
    """
    frozen = frozen or FrozenBlocks()
    k, n = layout.k, layout.n
    mu = np.array([m[layout.mu_index(j)] for j in range(k)])
    mu2 = np.array([m[layout.mu2_index(j)] for j in range(k)])
    if layout.has_pi_tau:
        logpi = m[:k].copy()
        tau = np.array([m[layout.tau_index(j)] for j in range(k)])
        logtau = np.array([m[layout.logtau_index(j)] for j in range(k)])
    else:
        logpi = np.log(frozen.pi)
        tau = frozen.tau.copy()
        logtau = np.log(frozen.tau)
    resp = m[layout.z_slice].reshape(n, k)
    if layout.x_dim:
        # a perturbed vector may sit off the moment cone, so skip validation
        xcoords = m[layout.x_slice]
        eff_data = SimpleNamespace(ex=xcoords[0::2].copy(), ex2=xcoords[1::2].copy())
    else:
        eff_data = data

    state = MeanState(logpi, mu, mu2, tau, logtau, resp)
    new = parallel_update(eff_data, priors, state, frozen)

    out = np.empty_like(m)
    if layout.has_pi_tau:
        out[:k] = new.logpi
    for j in range(k):
        out[layout.mu_index(j)] = new.mu[j]
        out[layout.mu2_index(j)] = new.mu2[j]
        if layout.has_pi_tau:
            out[layout.tau_index(j)] = new.tau[j]
            out[layout.logtau_index(j)] = new.logtau[j]
    out[layout.z_slice] = new.resp.ravel()
    if layout.x_dim:
        pinned = np.empty(layout.x_dim)
        pinned[0::2] = data.ex
        pinned[1::2] = data.ex2
        out[layout.x_slice] = pinned
    return out


@dataclass(frozen=True)
class JacobianCheck:
    max_rel_error: float
    worst_row: int
    worst_col: int
    checked_entries: int


def verify_jacobian(post: MixturePosterior, data: DataMoments, priors: MixturePriors,
                    layout: MeanLayout, frozen: FrozenBlocks | None = None,
                    step: float = 1e-6, magnitude_floor: float = 1e-8,
                    tol: float = 1e-9) -> JacobianCheck:
    """Central finite differences of the update map against the analytic R.

    Relative error is reported over entries whose magnitude exceeds
    ``magnitude_floor`` on either side.  Shipped as a diagnostic so frozen-
    block configurations can be validated outside the test suite.
    """
    jac = jacobian_M(post, data, priors, layout, frozen, tol=tol)
    analytic = dense_jacobian(jac)
    m = mean_vector(post, layout, data, frozen)
    numeric = np.zeros_like(analytic)
    base_out = update_map(m, layout, data, priors, frozen)
    for i in range(layout.dim):
        h = step * max(1.0, abs(m[i]))
        plus = m.copy()
        minus = m.copy()
        plus[i] += h
        minus[i] -= h
        numeric[:, i] = (update_map(plus, layout, data, priors, frozen)
                         - update_map(minus, layout, data, priors, frozen)) / (2.0 * h)
    # Indicator outputs near 1.0 lose relative precision to the float grid;
    # the softmax rows sum to one identically, so rebuild those rows'
    # differences from their siblings, which sit near 0 and difference cleanly.
    for n in range(layout.n):
        rows = [layout.z_index(n, k) for k in range(layout.k)]
        big = int(np.argmax(base_out[rows]))
        if base_out[rows[big]] > 0.5:
            others = [r_ for j, r_ in enumerate(rows) if j != big]
            numeric[rows[big], :] = -numeric[others, :].sum(axis=0)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > magnitude_floor
    rel = np.zeros_like(analytic)
    rel[mask] = np.abs(analytic - numeric)[mask] / scale[mask]
    worst = int(np.argmax(rel))
    row, col = np.unravel_index(worst, rel.shape)
    return JacobianCheck(max_rel_error=float(rel[row, col]), worst_row=int(row),
                         worst_col=int(col), checked_entries=int(mask.sum()))


# ---------------------------------------------------------------------------
# Multivariate-normal exactness testbed
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MvnTarget:
    """A normal target N(mu, sigma) with a block partition of coordinates."""

    mu: np.ndarray
    sigma: np.ndarray
    blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "blocks",
                           tuple(np.asarray(b, dtype=int) for b in self.blocks))
        d = self.mu.size
        if self.sigma.shape != (d, d):
            raise ValueError("sigma must be D x D")
        if np.max(np.abs(self.sigma - self.sigma.T)) > 1e-10:
            raise ValueError("sigma must be symmetric")
        seen = np.concatenate(self.blocks) if self.blocks else np.array([], dtype=int)
        if sorted(seen.tolist()) != list(range(d)):
            raise ValueError("blocks must partition the coordinates")

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class MvnFitResult:
    mean: np.ndarray
    block_covs: tuple
    converged: bool
    sweeps: int
    residual: float
    spectral_radius: float


def _mvn_jacobian(target: MvnTarget, lam: np.ndarray) -> np.ndarray:
    """Update-map Jacobian on the mean coordinates: -Lambda_jj^{-1} Lambda_j,-j."""
    d = target.dim
    r = np.zeros((d, d))
    for idx in target.blocks:
        other = np.setdiff1d(np.arange(d), idx)
        if other.size:
            r[np.ix_(idx, other)] = -np.linalg.solve(lam[np.ix_(idx, idx)],
                                                     lam[np.ix_(idx, other)])
    return r


def mvn_mfvb_fit(target: MvnTarget, tol: float = 1e-12,
                 max_sweeps: int = 50_000) -> MvnFitResult:
    """Coordinate updates for a normal target: m_j <- mu_j - L_jj^{-1} L_j,-j (m_-j - mu_-j).

    The converged mean equals the target mean; block covariances are the
    conditional ones, Lambda_jj^{-1}.
    """
    cond = np.linalg.cond(target.sigma)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise IllConditionedError(float(cond), "mvn target covariance")
    lam = np.linalg.inv(target.sigma)
    d = target.dim
    mu = target.mu
    m = np.zeros(d)
    converged = False
    sweeps = 0
    for sweep in range(1, max_sweeps + 1):
        prev = m.copy()
        for idx in target.blocks:
            other = np.setdiff1d(np.arange(d), idx)
            if other.size:
                rhs = lam[np.ix_(idx, other)] @ (m[other] - mu[other])
                m[idx] = mu[idx] - np.linalg.solve(lam[np.ix_(idx, idx)], rhs)
            else:
                m[idx] = mu[idx]
        sweeps = sweep
        if np.max(np.abs(m - prev)) < tol:
            converged = True
            break
    residual = float(np.max(np.abs(m - mu)))
    jac = _mvn_jacobian(target, lam)
    spectral_radius = float(np.max(np.abs(np.linalg.eigvals(jac))))
    block_covs = tuple(np.linalg.inv(lam[np.ix_(idx, idx)]) for idx in target.blocks)
    return MvnFitResult(mean=m, block_covs=block_covs, converged=converged,
                        sweeps=sweeps, residual=residual,
                        spectral_radius=spectral_radius)


def mvn_lrvb_check(target: MvnTarget, tol: float = 1e-12):
    """Corrected covariance for a normal target and its error against truth.

    Runs the correction on the mean coordinates only; for a normal target
    the quadratic statistics never couple back into the means.
    """
    fit_result = mvn_mfvb_fit(target, tol=tol)
    if not fit_result.converged:
        raise RuntimeError(
            f"mvn coordinate fit did not converge (spectral radius "
            f"{fit_result.spectral_radius:.3f})"
        )
    lam = np.linalg.inv(target.sigma)
    d = target.dim
    sigma_q = np.zeros((d, d))
    for idx, cov in zip(target.blocks, fit_result.block_covs):
        sigma_q[np.ix_(idx, idx)] = cov
    r = _mvn_jacobian(target, lam)
    sigma_hat = corrected_solve(np.eye(d) - r, sigma_q, "mvn covariance solve")
    sigma_hat = 0.5 * (sigma_hat + sigma_hat.T)
    rel_error = float(np.linalg.norm(sigma_hat - target.sigma)
                      / np.linalg.norm(target.sigma))
    return sigma_hat, rel_error
