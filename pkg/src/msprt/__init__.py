"""Sequential m-arm hypothesis testing with always-valid p-values.

The engine evaluates a mixture-normal likelihood ratio on streaming
experiment data at fixed batch intervals and stops when the running
maximum of the ratio crosses ``1/alpha``.  Supported metrics: log risk
ratio, log odds ratio, difference in proportions, difference in means,
and the nonparametric stochastic-superiority (AUC) effect.
"""

from .engine import (
    ConfigurationError,
    SnapshotError,
    TestConfig,
    TestState,
    new_test,
    restore,
    snapshot,
)
from .metrics import (
    METRICS,
    ArmStats,
    ContrastEstimate,
    InsufficientDataError,
    auc_contrast,
    auc_estimates,
    contrast_covariance,
    mean_diff_contrast,
    odds_ratio_contrast,
    prop_diff_contrast,
    risk_ratio_contrast,
    sigma_scale_estimate,
)
from .priors import (
    FactorizationError,
    GaussianSummary,
    MixtureNormalPrior,
    PriorComponent,
    PriorFormatError,
    load_prior_file,
    log_mvn_pdf,
    msprt_log_ratio,
    prior_from_json,
    prior_to_json,
    scale_prior_to_effect_size,
    validate_prior,
)
from .simulate import (
    CovarianceDiagnostic,
    GeneratorSpec,
    ScenarioSpec,
    SimulationReport,
    child_seed,
    covariance_diagnostic,
    martingale_diagnostic,
    run_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "ArmStats",
    "ConfigurationError",
    "ContrastEstimate",
    "CovarianceDiagnostic",
    "FactorizationError",
    "GaussianSummary",
    "GeneratorSpec",
    "InsufficientDataError",
    "METRICS",
    "MixtureNormalPrior",
    "PriorComponent",
    "PriorFormatError",
    "ScenarioSpec",
    "SimulationReport",
    "SnapshotError",
    "TestConfig",
    "TestState",
    "auc_contrast",
    "auc_estimates",
    "child_seed",
    "contrast_covariance",
    "covariance_diagnostic",
    "load_prior_file",
    "log_mvn_pdf",
    "martingale_diagnostic",
    "mean_diff_contrast",
    "msprt_log_ratio",
    "new_test",
    "odds_ratio_contrast",
    "prior_from_json",
    "prior_to_json",
    "prop_diff_contrast",
    "restore",
    "risk_ratio_contrast",
    "run_scenario",
    "scale_prior_to_effect_size",
    "sigma_scale_estimate",
    "snapshot",
    "validate_prior",
]
