"""Exception types raised across the package."""


class PimtError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(PimtError, ValueError):
    pass


class BandUnrealizableError(PimtError, ValueError):
    def __init__(self, band_name: str, message: str):
        super().__init__(f"band {band_name!r}: {message}")
        self.band_name = band_name


class EmptyOutputError(PimtError, ValueError):
    pass


class PatchSizeError(PimtError, ValueError):
    pass


class DimensionError(PimtError, ValueError):
    pass


class ConfigurationError(PimtError, ValueError):
    pass


class TrainingDivergenceError(PimtError, RuntimeError):
    pass


class MetricUndefinedError(PimtError, ValueError):
    pass


class SplitInfeasibleError(PimtError, ValueError):
    pass


class CompatibilityError(PimtError, ValueError):
    pass
