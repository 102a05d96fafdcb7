"""Spatio-temporal modelling of weekly air pollution panels.

The pipeline: ingest raw station readings into a weekly panel on the
square-root scale, cluster stations, pick decay parameters by forward
cross-validation, fit the iterative weighted GLS model, score-test for
cluster trend effects, and predict at new space-time targets. A
simulation harness checks test size and power against the generating
process.
"""
from .clustering import ClusterAssignment, assign_new_site, choose_k, kmeans
from .covariance import BlockCovariance, CovarianceParams, build_blocks, exp_corr
from .design import DesignMatrix, build_design, design_row, scale_time
from .errors import (
    ConditioningError,
    CrossRefError,
    DomainError,
    MissingDataError,
    NumericalError,
    ParseError,
    RankError,
    RequestError,
    SchemaError,
    StPanelError,
    ValidationError,
)
from .estimation import FittedModel, WeightScheme, fit, weight_matrix
from .inference import LMTestResult, lm_test
from .ingest import aggregate_weekly, build_panel, parse_readings, parse_stations, read_panel
from .panel import PanelOrder, StationTable, WeekCalendar, WeeklyPanel
from .prediction import (
    BlupResult,
    CVReport,
    PredictionRequest,
    blup,
    cross_validate_decay,
    validation_mse,
)
from .simulation import SimSpec, SimTruth, StudyResult, simulate_panel, size_power_study

__version__ = "0.1.0"

__all__ = [
    "BlockCovariance",
    "BlupResult",
    "ClusterAssignment",
    "ConditioningError",
    "CovarianceParams",
    "CrossRefError",
    "CVReport",
    "DesignMatrix",
    "DomainError",
    "FittedModel",
    "LMTestResult",
    "MissingDataError",
    "NumericalError",
    "PanelOrder",
    "ParseError",
    "PredictionRequest",
    "RankError",
    "RequestError",
    "SchemaError",
    "SimSpec",
    "SimTruth",
    "StationTable",
    "StPanelError",
    "StudyResult",
    "ValidationError",
    "WeekCalendar",
    "WeeklyPanel",
    "WeightScheme",
    "aggregate_weekly",
    "assign_new_site",
    "blup",
    "build_blocks",
    "build_design",
    "build_panel",
    "choose_k",
    "cross_validate_decay",
    "design_row",
    "exp_corr",
    "fit",
    "kmeans",
    "lm_test",
    "parse_readings",
    "parse_stations",
    "read_panel",
    "scale_time",
    "simulate_panel",
    "size_power_study",
    "validation_mse",
    "weight_matrix",
]
