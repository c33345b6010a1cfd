"""Exception hierarchy.

Validation problems derive from ``ValueError`` and numerical failures from
``ArithmeticError`` so callers (and the CLI exit-code mapping) can catch
either family without importing every class.
"""


class SftgError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SftgError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class CapacityError(ValidationError):
    def __init__(self, message, max_feasible):
        super().__init__(message)
        self.max_feasible = max_feasible


class DegenerateChannelError(ValidationError):
    def __init__(self, message, channel):
        super().__init__(message)
        self.channel = channel


class DegenerateBatchError(ValidationError):
    pass


class DegenerateFeatureError(ValidationError):
    pass


class MissingClassError(ValidationError):
    pass


class EmptyInputError(ValidationError):
    pass


class NoValidQueryError(ValidationError):
    pass


class UnknownSubjectError(ValidationError):
    pass


class FormatError(ValidationError):
    """A binary file could not be parsed."""


class BadMagicError(FormatError):
    pass


class MalformedHeaderError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ShapeMismatchError(FormatError, ShapeError):
    pass


class ChecksumError(FormatError):
    """Stored checksum does not match the payload."""


class NumericalError(SftgError, ArithmeticError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class DivergenceError(NumericalError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
