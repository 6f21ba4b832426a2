"""Exception hierarchy shared across the package."""


class PartBilinearError(Exception):
    """Base class for all package errors."""


class DimensionError(PartBilinearError, ValueError):
    """Shapes or layouts of two operands do not agree."""


class CoordinateRangeError(PartBilinearError, IndexError):
    """A coordinate or region lies outside the map grid."""


class DegenerateEmbeddingError(PartBilinearError, ArithmeticError):
    """An embedding has zero norm and cannot be normalized."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class EmptyInputError(PartBilinearError, ValueError):
    pass


class MalformedBatchError(PartBilinearError, ValueError):
    pass


class ConfigurationError(PartBilinearError, ValueError):
    pass


class NumericFailureError(PartBilinearError, ArithmeticError):
    pass


class ValidationError(PartBilinearError, ValueError):
    """A feature map violates its invariants."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class FormatError(PartBilinearError, ValueError):
    """File does not carry the expected magic or version."""


class CorruptionError(PartBilinearError, ValueError):
    """File ends before the declared payload is complete."""

    def __init__(self, message, offset, expected):
        super().__init__(message)
        self.offset = offset
        self.expected = expected
