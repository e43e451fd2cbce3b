"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class SSMComposeError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class InvalidInputError(SSMComposeError):
    """Caller supplied arguments that violate an operation's preconditions."""

    exit_code = 2


class NotFoundError(InvalidInputError):
    """A requested context id does not exist in the store."""


class UnsupportedConfigError(InvalidInputError):
    """Operation restricted to a narrower model configuration (e.g. single layer)."""


class ConfigMismatchError(SSMComposeError):
    """States or stores produced under different model configurations were mixed."""

    exit_code = 3


class NumericOverflowError(SSMComposeError):
    """A scan produced a non-finite intermediate value."""

    exit_code = 4


class TrainingDivergedError(SSMComposeError):
    """Training loss became non-finite."""

    exit_code = 4

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")
