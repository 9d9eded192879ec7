"""Mean-field variational Bayes for normal mixtures with linear-response
covariance correction, observation-influence scores, and an MH baseline."""

from .estimator import NormalMixtureLRVB
from .expfam import (
    CategoricalBlock,
    DirichletBlock,
    FamilyMoments,
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
from .leverage import (
    LeverageModel,
    LeverageScores,
    LinearModelCase,
    linear_leverage,
    linear_leverage_via_lrvb,
    manual_perturbation,
    mixture_leverage,
)
from .linear_response import (
    JacobianBlocks,
    LrvbEstimate,
    MeanLayout,
    MvnTarget,
    assemble_sigma_q,
    build_layout,
    jacobian_M,
    lrvb_covariance,
    mvn_lrvb_check,
    mvn_mfvb_fit,
    verify_jacobian,
)
from .mh import (
    MhConfig,
    PosteriorDraws,
    UnconstrainedParams,
    find_map,
    log_posterior,
    mh_independence,
    sample_moments,
)
from .mixture import (
    DataMoments,
    FitOptions,
    FitResult,
    FrozenBlocks,
    MixturePosterior,
    MixturePriors,
    fit,
    fixed_point_residual,
    point_estimates,
    update_mu,
    update_pi,
    update_tau,
    update_z,
)

__version__ = "0.1.0"
