from typing import Optional


class CrossViewError(Exception):
    """
    Base class for all library errors.
    Each subclass carries the exit code the command line maps it to.
    """

    exit_code = 2


class UsageError(CrossViewError):
    """Invalid call: empty inputs, K larger than the reference set, unknown flags."""

    exit_code = 1


class DomainError(UsageError, ValueError):
    """A numeric argument lies outside the domain of the operation."""


class ConfigurationError(CrossViewError):
    """Shapes, presets or checkpoint headers that do not fit together."""

    exit_code = 2


class DataError(CrossViewError):
    """Missing or unreadable dataset files."""

    exit_code = 2


class ManifestParseError(DataError):
    """
    A manifest or pairing file could not be parsed.

    Args:
        message (str): What went wrong.
        path (str): File being parsed.
        line_number (int|None): 1-based line number, if the error is line specific.
    """

    def __init__(self, message: str, path: str, line_number: Optional[int] = None):
        self.path = str(path)
        self.line_number = line_number
        location = self.path if line_number is None else f"{self.path}:{line_number}"
        super().__init__(f"{location}: {message}")


class NumericError(CrossViewError):
    """
    Non-finite values or degenerate vectors encountered during computation.

    The optional ``step``, ``epoch`` and ``batch`` attributes locate the failure.
    """

    exit_code = 3

    def __init__(
        self,
        message: str,
        step: Optional[int] = None,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
    ):
        self.step = step
        self.epoch = epoch
        self.batch = batch
        where = [
            f"{name}={value}"
            for name, value in (("epoch", epoch), ("batch", batch), ("step", step))
            if value is not None
        ]
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
