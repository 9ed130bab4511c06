"""Effect-size discrepancy decomposition between paired randomized studies."""

__version__ = "0.1.0"

from .errors import (
    AdjustmentError,
    BalanceError,
    DegenerateFeaturesError,
    EstimationError,
    InfeasibleBalanceError,
    JackknifeError,
    MleConvergenceError,
    SelectionEventError,
    ShiftDiagError,
    SingularDesignError,
    TruncationMassError,
    ValidationError,
)
from .datamodel import (
    AnalysisSpec,
    MomentSpec,
    OverlapDiagnostics,
    SelectionSpec,
    StudyDataset,
    TemplateSpec,
    check_overlap,
    from_columns,
    load_dataset,
    loads_dataset,
    summarize,
    validate_pair,
)
from .decomp import Decomposition, estimate_components
from .inference import (
    EstimatorVector,
    JackknifeCovariance,
    estimator_vector,
    jackknife_covariance,
    normal_cis,
)
from .selectadj import (
    AdjustedDecomposition,
    SelectionModel,
    adjust_components,
    invert_ci,
    selective_mle,
    truncated_prob,
)
from .simulate import (
    METHODS,
    SETTINGS,
    ComponentCoverage,
    CoverageReport,
    DgpConfig,
    FixedN2,
    PowerCalculated,
    generate_pair,
    generate_selected_original,
    oracle_truths,
    power_n2,
    run_coverage,
    setting_spec,
    setting_truth,
)

__all__ = [
    "__version__",
    "AdjustedDecomposition",
    "AdjustmentError",
    "AnalysisSpec",
    "BalanceError",
    "ComponentCoverage",
    "CoverageReport",
    "Decomposition",
    "DegenerateFeaturesError",
    "DgpConfig",
    "EstimationError",
    "EstimatorVector",
    "FixedN2",
    "InfeasibleBalanceError",
    "JackknifeCovariance",
    "JackknifeError",
    "METHODS",
    "MleConvergenceError",
    "MomentSpec",
    "OverlapDiagnostics",
    "PowerCalculated",
    "SETTINGS",
    "SelectionEventError",
    "SelectionModel",
    "SelectionSpec",
    "ShiftDiagError",
    "SingularDesignError",
    "StudyDataset",
    "TemplateSpec",
    "TruncationMassError",
    "ValidationError",
    "adjust_components",
    "check_overlap",
    "estimate_components",
    "estimator_vector",
    "from_columns",
    "generate_pair",
    "generate_selected_original",
    "invert_ci",
    "jackknife_covariance",
    "load_dataset",
    "loads_dataset",
    "normal_cis",
    "oracle_truths",
    "power_n2",
    "run_coverage",
    "selective_mle",
    "setting_spec",
    "setting_truth",
    "summarize",
    "truncated_prob",
    "validate_pair",
]
