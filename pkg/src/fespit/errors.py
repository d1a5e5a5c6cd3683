"""Exception types shared across the package."""


class FespitError(Exception):
    pass


class ConfigError(FespitError, ValueError):
    """Invalid configuration: bad dimension, learning rate, key, or value."""


class InputError(FespitError, ValueError):
    """Bad call-site data: label out of range, empty batch, length mismatch."""


class ProtocolError(FespitError, RuntimeError):
    """Operations invoked out of order or with mismatched state."""


class PartitionError(FespitError, RuntimeError):
    pass


class EstimationError(FespitError, RuntimeError):
    def __init__(self, message, direction_index=None):
        super().__init__(message)
        self.direction_index = direction_index
