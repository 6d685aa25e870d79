"""Exception types shared across the package."""


class KeyformerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(KeyformerError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(KeyformerError):
    """A precondition on an operation's inputs was violated."""


class ConfigError(KeyformerError):
    """Invalid model or training configuration."""


class SchemaError(KeyformerError):
    """A raw input file does not match the expected column schema."""


class SizingError(KeyformerError):
    """Requested split sizes exceed the available subjects."""


class ProtocolError(KeyformerError):
    """A subject does not satisfy the evaluation protocol's session layout."""


class CheckpointError(KeyformerError):
    """A checkpoint file failed version, shape, or checksum validation."""


class TrainingError(KeyformerError):
    """Training aborted, e.g. on a non-finite loss."""


class StoreError(KeyformerError):
    """The template store log is unreadable beyond normal crash repair."""
