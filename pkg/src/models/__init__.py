from .schemas import (
    SIMPLEX_TOL,
    MIXTURE_TOL,
    Activation,
    LossKind,
    OptimizerKind,
    RegularizerKind,
    WeightingMode,
    ExpertMode,
    DataMode,
    ExperimentKind,
    ReportFormat,
    BoundConfig,
    Remark3Check,
    RegularizerConfig,
    ToySection,
    DgSection,
    ExperimentConfig,
    ToyRow,
    WeightReport,
    DgRow,
    AblationCell,
    GradCheckReport,
)

__all__ = [
    "SIMPLEX_TOL",
    "MIXTURE_TOL",
    "Activation",
    "LossKind",
    "OptimizerKind",
    "RegularizerKind",
    "WeightingMode",
    "ExpertMode",
    "DataMode",
    "ExperimentKind",
    "ReportFormat",
    "BoundConfig",
    "Remark3Check",
    "RegularizerConfig",
    "ToySection",
    "DgSection",
    "ExperimentConfig",
    "ToyRow",
    "WeightReport",
    "DgRow",
    "AblationCell",
    "GradCheckReport",
]
