"""Exception hierarchy. Exit codes: 2 config, 3 data, 4 numerical."""


class AirwayKitError(Exception):
    exit_code = 1


class ConfigError(AirwayKitError):
    exit_code = 2


class DataError(AirwayKitError):
    exit_code = 3


class NumericalError(AirwayKitError):
    exit_code = 4


class RenderError(DataError):
    """Label geometry cannot be rasterized into the requested patch."""


class StandardizationError(DataError):
    """Patch has zero variance and cannot be standardized."""


class MeasurementError(DataError):
    """A physics-based measurement could not be completed on this patch."""


class FitError(NumericalError):
    """Degenerate input to a least-squares fit."""


class ConvergenceError(NumericalError):
    """Iterative optimization failed to converge."""
