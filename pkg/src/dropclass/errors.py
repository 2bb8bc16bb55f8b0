"""Exception types shared across the package.

Every domain error raised by the library derives from DropClassError so the
CLI can map it to a single exit code; the subclasses name the violated
contract.
"""


class DropClassError(Exception):
    """Base class for all domain errors."""


class DimensionError(DropClassError):
    """Tensor shapes are inconsistent with the operation's contract."""


class NonFiniteError(DropClassError):
    """A tensor holds NaN or Inf after a public operation."""


class FormatError(DropClassError):
    """A serialized file (tensor, label map, checkpoint) is malformed."""


class GenerationError(DropClassError):
    """Scene generation could not satisfy a layout rule."""


class ProtocolError(DropClassError):
    """An analysis protocol's precondition is not met."""


class ConfigError(DropClassError):
    """A config file or config value violates its schema."""


class ManifestError(DropClassError):
    """An experiment manifest failed verification or replay."""


class TrainingDiverged(DropClassError):
    """The training loss became non-finite; carries the offending batch."""

    def __init__(self, message, iteration=None, batch_indices=None):
        super().__init__(message)
        self.iteration = iteration
        self.batch_indices = batch_indices
