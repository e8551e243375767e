"""Exception types raised across the package."""


class DogoError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DogoError, ValueError):
    pass


class ZeroNormRow(DogoError, ValueError):
    pass


class TemperatureNonPositive(DogoError, ValueError):
    pass


class InvalidDistribution(DogoError, ValueError):
    pass


class NonFiniteLoss(DogoError, FloatingPointError):
    """A loss became NaN/inf; ``diagnostics`` holds the offending step's values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DimensionMismatch(DogoError, ValueError):
    pass


class PredictorRequired(DogoError, ValueError):
    pass


class NoPredictor(DogoError, RuntimeError):
    pass


class ImageTooSmall(DogoError, ValueError):
    pass


class DatasetNotFound(DogoError, FileNotFoundError):
    pass


class CorruptArchive(DogoError, IOError):
    pass


class EmptyClass(DogoError, ValueError):
    pass


class CheckpointMismatch(DogoError, ValueError):
    pass


class CheckpointMissing(DogoError, FileNotFoundError):
    pass


class KTooLarge(DogoError, ValueError):
    pass


class DiskFull(DogoError, OSError):
    pass


class ConfigInvalid(DogoError, ValueError):
    """Invalid run configuration; ``key`` names the offending dotted key path."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class NoReports(DogoError, FileNotFoundError):
    pass


class TooFewCheckpoints(DogoError, ValueError):
    pass


class RunExists(DogoError, FileExistsError):
    pass
