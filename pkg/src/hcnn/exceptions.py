"""Exception hierarchy shared by every hcnn module."""


class HCNNError(Exception):
    """Base class for all errors raised by hcnn."""


class ShapeError(HCNNError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(HCNNError, ValueError):
    """An option or hyperparameter is outside its supported range."""


class CorruptionError(HCNNError, ValueError):
    """Recorded pooling indices point outside the target plane."""


class CheckpointError(HCNNError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """The file is not an hcnn checkpoint (bad magic or malformed header)."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


class TruncatedCheckpointError(CheckpointError):
    """The file ended before all declared records were read."""


class CheckpointShapeError(CheckpointError, ShapeError):
    """A stored parameter does not match the target network's layout."""


class FitError(HCNNError, ValueError):
    """A statistical model cannot be fitted to the given data."""


class DegenerateFitError(FitError):
    """The fitted model would have zero variance."""


class PairingError(HCNNError):
    """An image has no counterpart with the same stem."""


class ImageFormatError(HCNNError):
    """A file could not be decoded as an image."""


class SizeError(HCNNError, ValueError):
    """An image is too small for the requested crop."""


class DegenerateInputError(HCNNError, ValueError):
    """A metric is undefined for the given input (e.g. an empty class)."""

