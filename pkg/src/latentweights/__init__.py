"""Nonresponse adjustment through a latent will to respond."""

from .data import (
    ItemResponseMatrix, ParseError, SchemaError, SurveySample, ValidationError,
    derive_indicators, load_survey_csv, raw_scores,
)
from .diagnostics import (
    ItemFitReport, cronbach_alpha, infit_outfit, item_fit_report, margin_residuals,
    point_measure_correlation, residual_pca_first_eigenvalue,
)
from .estimators import (
    WeightSet, build_weights, ht_estimator, naive_estimator, three_phase_estimator,
)
from .latent import (
    DegenerateItemError, FitConfig, LatentFit, TwoPLParams, fit_2pl_em, fit_latent, fit_rasch,
    gauss_hermite, marginal_loglik, posterior_theta,
)
from .propensity import (
    PHANTOM_ID, PropensityConfig, PropensityModel, SeparationError, adjust_sample,
    augment_phantom, estimate_thetas_stage1, fit_response_logistic, unit_response_prob,
)
from .simulation import (
    MonteCarloOptions, PopulationSpec, SimulationResult, build_population, run_monte_carlo,
)
from .variance import (
    CalibrationError, CalibrationSpec, JackknifeError, confidence_interval, gencalib_solve,
    jackknife_replicates, replicate_variance,
)

__version__ = "0.1.0"
