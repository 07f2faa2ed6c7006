"""Exception hierarchy shared by all modules."""


class MPCapsError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgument(MPCapsError, ValueError):
    pass


class NumericFailure(MPCapsError, ArithmeticError):
    pass


class DegenerateError(NumericFailure):
    """Raised when a quantity is undefined (all-zero norms, all-zero differences)."""


class FormatError(MPCapsError):
    pass


class ConsistencyError(FormatError):
    pass


class LengthError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
