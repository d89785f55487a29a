"""Multivariate empirical Bayes shrinkage with false-sign-rate control."""

__version__ = "0.1.0"

from .adjustment import (
    Constant,
    InfoMat,
    InfoMatrix,
    LowerBound,
    ParamIndex,
    adjust_prior,
    assemble_info,
    info_entry,
    rule_of_two_bound,
    se_diag_u,
    variance_lower_bound,
    wald_upper_bound,
)
from .core import (
    EigenDecomp,
    MixturePrior,
    Observation,
    PriorComponent,
    eigendecompose,
    psd_project,
    truncate_rank,
    validate_prior,
)
from .fitting import (
    EmConfig,
    EmTrace,
    em_fit,
    em_fit_rank_constrained,
    refit_weights,
    sigma2_mle_isotropic,
)
from .posterior import (
    DecisionSet,
    PosteriorStats,
    PosteriorSummary,
    fsp,
    fsr_hat,
    lfsr_rank1_closed_form,
    marginal_log_likelihood,
    negprob_eigen_decomposed,
    negprob_fullrank_closed_form,
    posterior_stats,
    posterior_summary,
    reject_at_level,
    s_values,
    threshold_lfsr,
)
from .simulation import (
    FixedNoise,
    FsrReport,
    IdentityNoise,
    RankSweepResult,
    ScenarioConfig,
    Setting,
    WishartNoise,
    appendix_d_priors,
    generate_dataset,
    get_preset,
    rank_sweep,
    run_scenario,
    run_settings,
)

__all__ = [name for name in dir() if not name.startswith("_")]
