"""Exception hierarchy shared by all aerotree modules."""


class AerotreeError(Exception):
    """Base class for every error raised by this package."""


class FormatError(AerotreeError):
    """File content does not follow the expected format."""


class UnsupportedError(AerotreeError):
    """Valid file, but uses a feature this package does not handle."""


class ParameterError(AerotreeError, ValueError):
    pass


class ShapeError(AerotreeError, ValueError):
    pass


class BoundsError(AerotreeError, IndexError):
    pass


class EmptyMaskError(AerotreeError, ValueError):
    pass


class ConsistencyError(AerotreeError):
    pass


class UndefinedMetricError(AerotreeError, ArithmeticError):
    """A metric's denominator is zero; no value is defined."""


class SpecError(AerotreeError, ValueError):
    """Synthetic tree description cannot be realised on its grid."""


class ConfigError(AerotreeError):
    pass
