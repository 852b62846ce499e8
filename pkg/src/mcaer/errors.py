"""Exception hierarchy shared by every subsystem."""


class MCAERError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MCAERError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(MCAERError, ValueError):
    """A configuration value violates its contract."""


class ValidationError(MCAERError, ValueError):
    """An input value (box, label, mask, ...) is invalid."""


class StateError(MCAERError, RuntimeError):
    """An object is not in the state an operation requires."""


class NoFaceError(MCAERError):
    """No face is available for a sample."""


class MissingCueError(MCAERError):
    """A required cue (person mask) is unavailable in strict mode."""


class DetectorError(MCAERError, OSError):
    """A face-detector backend is unavailable or failed."""


class ParseError(MCAERError, ValueError):
    """Malformed text from a detector, sidecar or image header."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DatasetError(MCAERError):
    """Dataset layout or annotations are inconsistent."""


class TrainingAborted(MCAERError, RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


class CheckpointError(MCAERError):
    """Base class for checkpoint decoding failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, unsupported version or unreadable header."""


class CheckpointTruncatedError(CheckpointError):
    """Payload shorter than the tensor index requires."""


class CheckpointIndexError(CheckpointError):
    """Tensor index disagrees with the model it is loaded into."""
