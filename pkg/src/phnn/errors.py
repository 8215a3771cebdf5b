"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so keep the families stable:
configuration problems, data problems, and training divergence.
"""


class PHNNError(Exception):
    pass


class ConfigError(PHNNError, ValueError):
    pass


class DataError(PHNNError, ValueError):
    pass


class DimensionError(PHNNError, ValueError):
    pass


class ContractError(PHNNError, RuntimeError):
    pass


class DeterminismError(PHNNError, RuntimeError):
    pass


class UninitializedError(PHNNError, RuntimeError):
    pass


class ModeError(ConfigError):
    pass


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncationError(FormatError):
    pass


class CheckpointError(ConfigError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SplitError(DataError):
    pass


class CalibrationError(DataError):
    pass


class UndefinedMetricError(DataError):
    pass


class DivergenceError(PHNNError, RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
