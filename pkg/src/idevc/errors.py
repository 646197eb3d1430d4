"""Exception hierarchy shared across the package.

CLI exit-code contract: validation-type errors map to exit 2, I/O errors
(plain OSError) to exit 3, numeric aborts to exit 4.
"""


class IdevcError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(IdevcError):
    """Invalid configuration, arguments or file contents."""


class DimensionError(ValidationError):
    """Incompatible matrix shapes; message names the offending node."""


class PreconditionError(ValidationError):
    """A documented operation precondition was violated."""


class UnsupportedRegimeError(ValidationError):
    """Operation invoked on a data regime it does not support."""


class ContractError(IdevcError):
    """An API contract was broken (e.g. backward on a non-scalar node)."""


class NumericError(IdevcError):
    """Non-finite values or numeric overflow in a computation.

    ``last_checkpoint`` optionally references the most recent good
    checkpoint when raised from the training loop.
    """

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
