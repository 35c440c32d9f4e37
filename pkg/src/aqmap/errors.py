"""Exception hierarchy.

Every error carries a short machine-parseable ``error_class`` and the exit
code the CLI should use for it (2 usage, 3 data/format, 4 numeric).
"""


class AQMapError(Exception):
    error_class = "error"
    exit_code = 3


class ValidationError(AQMapError, ValueError):
    error_class = "validation-error"


class ParameterError(ValidationError):
    error_class = "parameter-error"


class GridIndexError(AQMapError, IndexError):
    error_class = "index-error"


class ShapeError(AQMapError, ValueError):
    error_class = "shape-error"


class CoverageError(AQMapError):
    error_class = "coverage-error"


class FormatError(AQMapError):
    error_class = "format-error"


class MalformedCSVError(FormatError):
    error_class = "malformed-csv"

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class MissingFileError(AQMapError, FileNotFoundError):
    error_class = "missing-file"


class EmptyTrainingSetError(ValidationError):
    error_class = "empty-training-set"


class NumericError(AQMapError, ArithmeticError):
    error_class = "numeric-error"
    exit_code = 4


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    ``last_good`` holds the most recent parameters with a finite loss and
    ``history`` the loss rows recorded up to that point.
    """

    error_class = "divergence"

    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history or []
