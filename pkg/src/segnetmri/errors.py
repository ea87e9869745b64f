"""Exception hierarchy shared across the package."""


class SegNetMRIError(Exception):
    """Base class for all package errors."""


class ParameterError(SegNetMRIError, ValueError):
    """An argument is outside its documented range."""


class InfeasibleMaskError(ParameterError):
    """The requested mask cannot sample even a single row."""


class ShapeError(SegNetMRIError, ValueError):
    """Array shapes are incompatible."""


class LabelError(SegNetMRIError, ValueError):
    """A label map holds an invalid class id."""


class UndefinedMetricError(SegNetMRIError, ValueError):
    """A metric is undefined for the given inputs (e.g. empty masks)."""


class ConfigurationError(SegNetMRIError, ValueError):
    """Model or experiment configuration is inconsistent."""


class TrainingDivergedError(SegNetMRIError, RuntimeError):
    """Training produced a non-finite or increasing loss."""


class LoadError(SegNetMRIError):
    """Base class for file loading failures."""


class VolumeNotFoundError(LoadError, FileNotFoundError):
    pass


class ContainerFormatError(LoadError, ValueError):
    """Malformed tensor container header or payload."""


class VolumeShapeMismatchError(LoadError, ShapeError):
    """Image and label volumes disagree in shape."""
