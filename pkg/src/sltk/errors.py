"""Exception hierarchy shared across the toolkit.

Two broad families matter to callers (the CLI maps them to exit codes):
validation/consistency problems and file-format/I-O problems.
"""


class SltkError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(SltkError):
    """Bad inputs, violated contracts, or inconsistent results."""


class CongruenceError(ValidationError):
    """Mask and weight matrices do not share a shape."""


class ParameterError(ValidationError):
    """A numeric parameter is outside its allowed range."""


class CriterionError(ValidationError):
    """Unknown channel-scoring criterion name."""


class ShapeError(ValidationError):
    """Tensor dimensions inconsistent with a layer shape."""


class WiringError(ValidationError):
    """Consecutive layers disagree on channel counts."""


class LayoutError(ValidationError):
    """A block layout violates its invariants (e.g. overlapping blocks)."""


class ConsistencyError(ValidationError):
    """Executors disagreed beyond tolerance on the same layer."""


class TrainingError(ValidationError):
    """Training diverged; carries the epoch at which loss became non-finite."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ArchiveFormatError(SltkError):
    """Malformed mask archive; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
