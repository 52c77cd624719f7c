"""Exception hierarchy shared by every module."""


class LRMCError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(LRMCError, ValueError):
    pass


class InvalidShapeError(LRMCError, ValueError):
    pass


class InvalidRankError(LRMCError, ValueError):
    pass


class NumericalFailureError(LRMCError, ArithmeticError):
    pass


class SingularFactorError(NumericalFailureError):
    """A gram matrix of one factor is singular or too ill-conditioned."""

    def __init__(self, side, cond, iteration=None):
        self.side = side
        self.cond = cond
        self.iteration = iteration
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(
            f"gram matrix of factor {side} is singular or ill-conditioned "
            f"(condition estimate {cond:.3e}){where}"
        )


class RankCollapseError(NumericalFailureError):
    pass


class ConfigurationError(LRMCError):
    pass


class ScheduleExhaustedError(LRMCError, IndexError):
    pass


class FormatError(LRMCError, ValueError):
    pass


class SchemaError(LRMCError, ValueError):
    """A schedule or config document violates its schema.

    ``field`` holds the dotted path of the offending field.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SearchFailureError(LRMCError):
    pass


class TrainingDivergedError(NumericalFailureError):
    pass
