"""Exception types shared across the package.

The CLI maps these onto stable exit codes, so raising the right kind
matters more than the message text.
"""


class DetnoError(Exception):
    """Base class for all package errors."""


class ConfigError(DetnoError, ValueError):
    """Invalid configuration value or violated precondition (exit code 2)."""


class DomainError(ConfigError):
    """Physical quantity outside its admissible range (e.g. density)."""


class ContractError(DetnoError, ValueError):
    """Shape or protocol mismatch between components."""


class NumericError(DetnoError, ArithmeticError):
    """Non-finite value detected during computation (exit code 4)."""


class CheckpointError(DetnoError, IOError):
    """Base class for checkpoint file problems (exit code 3)."""


class ChecksumError(CheckpointError):
    """Checkpoint CRC does not match its payload (truncation/corruption)."""


class UnknownTensorError(CheckpointError):
    """Checkpoint holds a tensor name the model does not declare (or misses one)."""


class ShapeMismatchError(CheckpointError):
    """Checkpoint tensor shape differs from the model's registered shape."""
