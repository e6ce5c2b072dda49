"""Exception hierarchy.

Three families map onto CLI exit codes: configuration/shape problems (2),
file-format problems (3) and numerical failures (4).
"""


class SafleError(Exception):
    pass


class ConfigError(SafleError, ValueError):
    pass


class FormatError(SafleError):
    pass


class NumericalError(SafleError, ArithmeticError):
    pass


class DimensionMismatch(ConfigError):
    pass


class CodeOutOfRange(ConfigError):
    pass


class IndexOutOfRange(ConfigError):
    pass


class LabelOutOfRange(ConfigError):
    pass


class NonFiniteValue(ConfigError):
    pass


class AlreadyRegularized(ConfigError):
    pass


class NotRegularized(ConfigError):
    pass


class NonPositiveGamma(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class GammaMismatch(ConfigError):
    pass


class TooFewSamples(ConfigError):
    pass


class EmptyClient(ConfigError):
    pass


class BadMagic(FormatError):
    pass


class ShapeOverflow(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


class FactorizationFailure(NumericalError):
    pass


class NegativeEigenBeyondTolerance(NumericalError):
    pass
