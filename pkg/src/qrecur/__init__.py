"""Quantile regression for recurrent-event rates under censoring."""
from __future__ import annotations

from .baseline import BaselineEstimate, estimate_baseline, naive_gamma
from .density import (
    GammaGrid,
    PosteriorDensity,
    default_gamma_grid,
    monotone_quantiles,
    piecewise_density,
    poisson_window_log_pmf,
    poisson_window_pmf,
    posterior_density,
    refine_grid,
    subject_quantiles,
    tau_increments,
)
from .errors import (
    DegenerateBin,
    EmptyRisk,
    GridOutOfRange,
    NoEvents,
    QrecurError,
    RangeError,
    RankDeficient,
    SchemaError,
    TooManyFailures,
    Unbounded,
    ValidationError,
    ZeroMass,
)
from .estimator import FitConfig, FitResult, fit, fit_naive
from .inference import (
    BootstrapSummary,
    ConstancyTestResult,
    average_effect,
    bootstrap,
    constancy_test,
)
from .qr import WeightedQRProblem, check_loss, solve_weighted_qr
from .records import (
    CoefficientPath,
    Dataset,
    Standardization,
    SubjectRecord,
    TauGrid,
    counting_process_value,
    evaluate_path,
    standardize_dataset,
)
from .sim import (
    DGPSpec,
    MonteCarloReport,
    generate_dataset,
    generate_subject,
    run_monte_carlo,
    true_coefficients,
)

__version__ = "0.1.0"

__all__ = [
    "BaselineEstimate",
    "BootstrapSummary",
    "CoefficientPath",
    "ConstancyTestResult",
    "DGPSpec",
    "Dataset",
    "DegenerateBin",
    "EmptyRisk",
    "FitConfig",
    "FitResult",
    "GammaGrid",
    "GridOutOfRange",
    "MonteCarloReport",
    "NoEvents",
    "PosteriorDensity",
    "QrecurError",
    "RangeError",
    "RankDeficient",
    "SchemaError",
    "Standardization",
    "SubjectRecord",
    "TauGrid",
    "TooManyFailures",
    "Unbounded",
    "ValidationError",
    "WeightedQRProblem",
    "ZeroMass",
    "__version__",
    "average_effect",
    "bootstrap",
    "check_loss",
    "constancy_test",
    "counting_process_value",
    "default_gamma_grid",
    "estimate_baseline",
    "evaluate_path",
    "fit",
    "fit_naive",
    "generate_dataset",
    "generate_subject",
    "monotone_quantiles",
    "naive_gamma",
    "piecewise_density",
    "poisson_window_log_pmf",
    "poisson_window_pmf",
    "posterior_density",
    "refine_grid",
    "run_monte_carlo",
    "solve_weighted_qr",
    "standardize_dataset",
    "subject_quantiles",
    "tau_increments",
    "true_coefficients",
]
