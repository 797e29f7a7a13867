"""Exception hierarchy shared by all transclaw modules."""


class TransclawError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TransclawError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(TransclawError):
    """Misuse of the autodiff graph (non-scalar loss, detached tensor, ...)."""


class NumericsError(TransclawError):
    """An operation produced non-finite values from finite inputs."""


class ConfigError(TransclawError):
    """A configuration violates its invariants."""


class CheckpointError(TransclawError):
    """A checkpoint file is corrupt, truncated, or incompatible."""


class DataError(TransclawError):
    """A dataset file or generation request is invalid."""


class TrainingError(TransclawError):
    """The optimization loop cannot proceed (empty data, diverged loss, ...)."""
