"""Exception hierarchy shared across the package."""


class VoxveilError(Exception):
    """Base class for all package errors."""


class SignalTooShortError(VoxveilError, ValueError):
    """Input is shorter than one analysis window (or too short for STOI)."""


class ParamMismatchError(VoxveilError, ValueError):
    pass


class UnsupportedRateError(VoxveilError, ValueError):
    pass


class ShapeMismatchError(VoxveilError, ValueError):
    pass


class InsufficientVoicedError(VoxveilError, ValueError):
    """Not enough voiced frames to build a speaker embedding."""


class ModelFormatError(VoxveilError, ValueError):
    pass


class IncompatibleModelError(ModelFormatError):
    pass


class NonFiniteLossError(VoxveilError, FloatingPointError):
    pass


class WavFormatError(VoxveilError, ValueError):
    pass


class MetricUnavailable(VoxveilError):
    """An optional external metric (ASR, MP3 encoder) could not be computed."""
