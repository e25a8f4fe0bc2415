"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` subclasses to exit code 1 and
:class:`NumericError` subclasses to exit code 2.
"""


class LMCError(Exception):
    pass


class ValidationError(LMCError, ValueError):
    pass


class NumericError(LMCError, ArithmeticError):
    pass


class UnsupportedClassCount(ValidationError):
    pass


class DataFormatError(ValidationError):
    pass


class InconsistencyError(ValidationError):
    pass


class VersionError(DataFormatError):
    pass


class CorruptionError(DataFormatError):
    pass


class ConfigError(ValidationError):
    pass


class DependencyError(ValidationError):
    pass


class DivergenceError(NumericError):
    pass


class DegenerateInputError(NumericError):
    pass


class ProbeQualityError(NumericError):
    pass
