"""Exception types shared across the package."""


class InvalidQuaternionError(ValueError):
    pass


class ConfigurationError(ValueError):
    """Dimensions or settings that cannot work together."""


class IngestionError(RuntimeError):
    """A dataset on disk is incomplete or malformed."""


class PreprocessingError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/inf loss; the message names the offending batch."""


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class InputShapeError(ValueError):
    pass
