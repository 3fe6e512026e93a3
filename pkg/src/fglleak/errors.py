"""Exception hierarchy shared across the package."""


class FglLeakError(Exception):
    """Base class for every error raised by this package."""


class FormatError(FglLeakError):
    """A dataset or checkpoint file is missing or malformed."""


class IntegrityError(FglLeakError):
    """Parsed data is internally inconsistent (dangling edges, id gaps)."""


class ConfigError(FglLeakError):
    """An experiment, defense or attack configuration is invalid."""


class ShapeError(FglLeakError, ValueError):
    pass


class NumericError(FglLeakError, ValueError):
    pass


class LeakageUnavailableError(FglLeakError):
    """The classifier gradients carry no usable pooled embedding."""


class InversionError(FglLeakError):
    pass


class RecoveryDegenerateError(FglLeakError):
    """Every coefficient in a GNFR layer vanished, so nothing can be solved."""
