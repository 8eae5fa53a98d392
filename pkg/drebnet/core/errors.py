class DrebError(Exception):
    pass


class InvariantViolation(DrebError, ValueError):
    pass


class ShapeMismatchError(InvariantViolation):
    pass


class TapeError(DrebError, RuntimeError):
    pass


class NonFiniteError(DrebError, FloatingPointError):
    pass


class MissingGradientError(DrebError, RuntimeError):
    pass


class ConfigError(DrebError, ValueError):
    pass


class DatasetError(DrebError, ValueError):
    pass


class CheckpointError(DrebError, ValueError):
    pass


class UsageError(DrebError):
    pass
