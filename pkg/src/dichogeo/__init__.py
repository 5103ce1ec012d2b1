"""dichogeo: geostatistical inference for prevalence surveys.

Linear and binomial-probit spatial model fitting, metrics for the
information lost by dichotomizing continuous outcomes, plug-in prevalence
prediction with exceedance maps, and a replication harness for the
simulation study.
"""

__version__ = "0.1.0"

from .binomial import (LatentIntegrationSettings, conditional_binary_loglik,
                       exact_loglik_smallm, fit_binomial, integrated_loglik)
from .core import (CorrelationFamily, CorrelationModel, Location, ModelParams,
                   PrevalenceParams, SplineSpec, SurveyDataset, build_covariance,
                   dichotomize, equirect_project, exp_correlation, simulate_gp,
                   simulate_survey, spline_basis, spline_design,
                   to_prevalence_scale, to_prevalence_scale_varying)
from .errors import (ConfigError, DichogeoError, NonConvergenceError,
                     NumericalConditioningError, ParameterDomainError,
                     SchemaError, UnsupportedSizeError)
from .infoloss import (CldReport, EfiSettings, InfoLossReport, cld,
                       composite_hessian_binary, composite_hessian_continuous,
                       efi_binary_two_points, efi_curve, efi_linear, loss_no_spatial,
                       loss_ratio, pairwise_composite_loglik)
from .linear import FitOptions, FitResult, fit_linear, gaussian_loglik
from .predict import (PredictionGrid, conditional_latent, exceedance_prob,
                      predict_prevalence)
from .simstudy import (ScenarioSpec, SimReport, generate_grid, run_scenario,
                       run_study, table_one_specs)
