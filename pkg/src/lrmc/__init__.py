"""Robust matrix completion by soft-thresholded scaled gradient descent, with learned schedules."""
from .errors import (
    ConfigurationError,
    FormatError,
    InvalidParameterError,
    InvalidRankError,
    InvalidShapeError,
    LRMCError,
    NumericalFailureError,
    RankCollapseError,
    ScheduleExhaustedError,
    SchemaError,
    SearchFailureError,
    SingularFactorError,
    TrainingDivergedError,
)
from .matops import IndexSet, MaskedMatrix, SVDTriple, masked_residual, scaled_grad_step, soft_threshold, sparsify_top_fraction, truncated_svd
from .problems import GroundTruth, ObservedMatrix, SyntheticInstance, generate_synthetic, incoherence
from .schedules import ParamSchedule, param_at
from .solver import FactorPair, SolveTrace, StopRule, oracle_schedule, scaledgd_solve, solve

__version__ = "0.1.0"
