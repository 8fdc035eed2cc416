"""Exception hierarchy shared across the package.

The CLI maps each category to its own exit code.
"""

from __future__ import annotations


class FedGFMError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ContractViolation(FedGFMError, ValueError):
    """A caller broke an operation's precondition."""

    exit_code = 2


class ConfigError(FedGFMError):
    exit_code = 2


class DataFormatError(FedGFMError):
    """On-disk container or checkpoint is malformed."""

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(FedGFMError, ValueError):
    """Graph content violates a structural invariant."""

    exit_code = 3


class SchemaError(DataFormatError):
    """Checkpoint or manifest schema version mismatch."""


class NumericError(FedGFMError, FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""

    exit_code = 4

    def __init__(self, message: str, op_id: int | None = None, component: str | None = None):
        super().__init__(message)
        self.op_id = op_id
        self.component = component
