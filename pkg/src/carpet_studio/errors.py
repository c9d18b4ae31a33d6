"""Exception types shared across the library, pipeline, and service."""


class CarpetStudioError(Exception):
    """Base class for all library errors."""


class UnsupportedFormatError(CarpetStudioError):
    pass


class CorruptImageError(CarpetStudioError):
    pass


class InvalidDimensionsError(CarpetStudioError):
    pass


class UnknownLayerError(CarpetStudioError):
    pass


class WeightsNotLoadedError(CarpetStudioError):
    pass


class WrongLayerError(CarpetStudioError):
    pass


class EmptyTextError(CarpetStudioError):
    pass


class TextTooLongError(CarpetStudioError):
    pass


class ShapeMismatchError(CarpetStudioError):
    pass


class LayerSetMismatchError(CarpetStudioError):
    pass


class PaletteMismatchError(CarpetStudioError):
    pass


class PatchTooLargeError(CarpetStudioError):
    pass


class EmptyGridError(CarpetStudioError):
    pass


class IndexOutOfRangeError(CarpetStudioError):
    pass


class NonFiniteLossError(CarpetStudioError):
    """Raised when an optimization loop produces a NaN or infinite loss.

    Carries the iteration index and the offending value so a failed job
    can report where the loop diverged.
    """

    def __init__(self, message, iteration=None, value=None):
        super().__init__(message)
        self.iteration = iteration
        self.value = value


class ValidationError(CarpetStudioError):
    """Config validation failure with per-field messages."""

    def __init__(self, field_errors):
        self.field_errors = dict(field_errors)
        msgs = "; ".join(f"{k}: {v}" for k, v in self.field_errors.items())
        super().__init__(msgs or "invalid config")


class AssetNotFoundError(CarpetStudioError):
    pass


class NotFoundError(CarpetStudioError):
    pass


class TooLargeError(CarpetStudioError):
    pass


class StageFailureError(CarpetStudioError):
    """Wraps an error raised inside a pipeline stage with the stage tag."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
