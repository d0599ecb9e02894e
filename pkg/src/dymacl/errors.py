"""Exception hierarchy shared by all modules."""


class DymaError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(DymaError):
    """Invalid configuration (world, network, curriculum)."""


class ProtocolError(DymaError):
    """Caller violated an operation's calling contract."""


class ShapeError(DymaError):
    """Array shapes are incompatible."""


class NumericError(DymaError):
    """A NaN or infinity appeared in a computation."""


class ContractError(DymaError):
    """Precondition of an operation was not met."""


class DomainError(DymaError):
    """Argument outside the mathematical domain (e.g. temperature <= 0)."""


class CheckpointError(DymaError):
    """Checkpoint is corrupt, truncated or incompatible."""


class NotReadyError(DymaError):
    """Replay buffer does not hold enough transitions to sample yet."""

    def __init__(self, message, task_id=None):
        super().__init__(message)
        self.task_id = task_id


class ParseError(ConfigError):
    """Malformed run configuration file."""


class AnalysisError(DymaError):
    """Embedding analysis cannot be computed on the given samples."""
