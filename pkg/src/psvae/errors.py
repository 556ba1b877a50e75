"""Exception hierarchy shared across the package."""


class PsvaeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PsvaeError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(PsvaeError):
    """Non-finite values encountered where finite math is required."""


class ContractError(PsvaeError):
    """An operation was called in a way its contract forbids."""


class DomainError(PsvaeError):
    """An argument lies outside the mathematical domain of the operation."""


class ConfigError(PsvaeError):
    """Invalid or inconsistent configuration values."""


class GridError(PsvaeError):
    """Patch collection does not form the complete grid it claims to."""


class ConstructionError(PsvaeError):
    """Model architecture cannot be realized with the given settings."""


class CalibrationError(PsvaeError):
    """Noise calibration cannot reach the requested target."""


class CheckpointError(PsvaeError):
    """Checkpoint file is malformed or incompatible with this build."""
