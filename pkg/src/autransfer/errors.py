"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so keep the class tree shallow.
"""


class AutransferError(Exception):
    """Base class for all package errors."""


class ContractError(AutransferError, ValueError):
    """A precondition on an argument was violated."""


class DimensionError(AutransferError, ValueError):
    """Operand shapes are incompatible."""


class TransferError(AutransferError):
    """Backbone shapes do not match the target configuration."""


class CheckpointError(AutransferError):
    """Checkpoint file is malformed or does not fit the requested config."""


class DatasetFormatError(AutransferError):
    """Dataset, score or threshold file is malformed.

    ``line`` is the 1-based line number when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
