"""Exception hierarchy shared by every turbstoch module."""


class TurbStochError(Exception):
    """Base class for all library errors."""


class ShapeError(TurbStochError, ValueError):
    pass


class DomainError(TurbStochError, ValueError):
    pass


class ContractError(TurbStochError, ValueError):
    """A documented precondition of an operation was violated."""


class TapeStateError(TurbStochError, RuntimeError):
    pass


class UninitializedStatsError(TurbStochError, RuntimeError):
    """Batch-norm evaluation requested before any running statistics exist."""


class OptimizerError(TurbStochError, FloatingPointError):
    pass


class ScaleError(TurbStochError, ValueError):
    pass


class DegenerateStatisticsError(TurbStochError, ValueError):
    pass


class FitError(TurbStochError, ValueError):
    pass


class ParameterError(TurbStochError, ValueError):
    pass


class ParseError(TurbStochError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RangeError(TurbStochError, ValueError):
    pass


class TrainingDivergedError(TurbStochError, RuntimeError):
    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)


class UsageError(TurbStochError, ValueError):
    pass


class FormatError(TurbStochError, IOError):
    """Base class for binary container errors (checkpoints and field files)."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class SpecHashMismatchError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass
