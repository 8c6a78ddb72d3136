"""Exception hierarchy shared by every module of the package."""


class DualAttnError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"


class UsageError(DualAttnError):
    kind = "usage"


class DimensionError(DualAttnError, ValueError):
    kind = "dimension"


class NumericError(DualAttnError, ArithmeticError):
    kind = "numeric"


class ConfigurationError(DualAttnError, ValueError):
    kind = "configuration"


class LengthError(DualAttnError, ValueError):
    kind = "length"


class VocabularyError(DualAttnError, ValueError):
    kind = "vocabulary"


class DataError(DualAttnError, ValueError):
    """Raised for malformed or inconsistent input data."""

    kind = "data"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ParseError(DataError):
    kind = "parse"


class SchemaError(DataError):
    kind = "schema"


class DegenerateBatchError(DualAttnError, ValueError):
    kind = "degenerate_batch"


class TrainingError(DualAttnError, RuntimeError):
    kind = "training"


class FormatError(DualAttnError, ValueError):
    kind = "format"


class CorruptionError(DualAttnError, ValueError):
    kind = "corruption"
