"""Moment-based nonlinear filtering via quadrature rules generated from moments."""

from momentfilter.baselines import (
    GaussianTrajectory,
    GridTrajectory,
    KalmanResult,
    ParticleTrajectory,
    bootstrap_pf,
    gauss_hermite_filter,
    grid_reference_filter,
    kalman_ou,
    stratified_resample,
)
from momentfilter.bench import (
    EstimateSpec,
    EstimatorSpec,
    ExperimentConfig,
    config_from_mapping,
    estimate_parameters,
    load_config,
    run_experiment,
    run_single,
)
from momentfilter.errors import (
    ConfigError,
    EigenDecompositionError,
    NonFiniteError,
    NonPositiveNormalizerError,
    NotPositiveDefiniteError,
    NumericalDivergence,
)
from momentfilter.filtering import (
    NLL_SENTINEL,
    FilterConfig,
    FilterTrajectory,
    MeasurementModel,
    nll_objective,
    predict_moments,
    run_moment_filter,
    update_moments,
)
from momentfilter.models import (
    MODEL_BUILDERS,
    BenchmarkModel,
    char_fn_from_moments,
    char_fn_from_samples,
    char_fn_window,
    make_model,
    simulate,
    sup_char_error,
)
from momentfilter.momentspace import (
    MomentSet,
    build_gram,
    build_hankels,
    count_indices,
    graded_lex_indices,
    multi_index_rank,
    standardize,
)
from momentfilter.quadrature import (
    QuadratureRule,
    integrate,
    jacobi_matrix_1d,
    moment_quadrature,
)
from momentfilter.transition import (
    SdeModel,
    TransitionConfig,
    conditional_mean_cov,
    conditional_moments,
    em_conditional_moments,
    gaussian_moment_set,
    gaussian_moments,
    tme_conditional_moment,
)

__all__ = [
    "BenchmarkModel",
    "ConfigError",
    "EigenDecompositionError",
    "EstimateSpec",
    "EstimatorSpec",
    "ExperimentConfig",
    "FilterConfig",
    "FilterTrajectory",
    "GaussianTrajectory",
    "GridTrajectory",
    "KalmanResult",
    "MODEL_BUILDERS",
    "MeasurementModel",
    "MomentSet",
    "NLL_SENTINEL",
    "NonFiniteError",
    "NonPositiveNormalizerError",
    "NotPositiveDefiniteError",
    "NumericalDivergence",
    "ParticleTrajectory",
    "QuadratureRule",
    "SdeModel",
    "TransitionConfig",
    "bootstrap_pf",
    "build_gram",
    "build_hankels",
    "char_fn_from_moments",
    "char_fn_from_samples",
    "char_fn_window",
    "conditional_mean_cov",
    "conditional_moments",
    "config_from_mapping",
    "count_indices",
    "em_conditional_moments",
    "estimate_parameters",
    "gauss_hermite_filter",
    "gaussian_moment_set",
    "gaussian_moments",
    "graded_lex_indices",
    "grid_reference_filter",
    "integrate",
    "jacobi_matrix_1d",
    "kalman_ou",
    "load_config",
    "make_model",
    "moment_quadrature",
    "multi_index_rank",
    "nll_objective",
    "predict_moments",
    "run_experiment",
    "run_moment_filter",
    "run_single",
    "simulate",
    "standardize",
    "stratified_resample",
    "sup_char_error",
    "tme_conditional_moment",
    "update_moments",
]

__version__ = "0.1.0"
