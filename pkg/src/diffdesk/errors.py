"""Exception hierarchy shared by all diffdesk modules."""


class DiffdeskError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DiffdeskError):
    """A configuration value or config file is invalid."""


class ShapeError(DiffdeskError):
    """Tensor shapes are inconsistent with an operator signature."""


class UnboundLeafError(DiffdeskError):
    """A computation graph was evaluated without binding every leaf."""


class NonScalarOutputError(DiffdeskError):
    """A gradient was requested for an output that is not a scalar."""


class TrainingDivergedError(DiffdeskError):
    """Training produced a non-finite loss."""


class CheckpointError(DiffdeskError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """Checkpoint file does not start with the expected magic bytes."""


class BadVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class BadChecksumError(CheckpointError):
    """Checkpoint payload does not match its trailing checksum."""


class ImageIOError(DiffdeskError):
    """Base class for image file parse failures."""


class MalformedHeaderError(ImageIOError):
    """Image file header could not be parsed."""


class UnsupportedMaxvalError(ImageIOError):
    """PPM maxval is not the supported 8-bit value 255."""


class TruncatedPayloadError(ImageIOError):
    """Image pixel payload is shorter than the header promises."""


class MetricError(DiffdeskError):
    """A metric was invoked on inputs it cannot score."""
