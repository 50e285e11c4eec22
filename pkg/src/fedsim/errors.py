"""Exception hierarchy shared by every fedsim module."""


class FedSimError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FedSimError):
    """Invalid layer specs, strategy settings or experiment config.

    ``path`` points at the offending config key when known (``strategies[1].batch_size``).
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ShapeError(FedSimError):
    pass


class DataError(FedSimError):
    pass


class FormatError(FedSimError):
    """Malformed IDX payload; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class PartitionError(FedSimError):
    pass


class AggregationError(FedSimError):
    pass


class SchedulingError(FedSimError):
    pass


class EvaluationError(FedSimError):
    pass
