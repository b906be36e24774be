"""Exception types shared across the package."""


class PrefixBatchError(Exception):
    """Base class for all errors raised by prefixbatch."""


class ParseError(PrefixBatchError):
    """A file could not be parsed. Carries the path and 1-based line number."""

    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason


class ValidationError(PrefixBatchError):
    """Input violated a documented invariant."""


class CapacityError(PrefixBatchError):
    """An operation was asked to exceed its documented size limit."""


class UnschedulableRequestError(PrefixBatchError):
    """A request can never fit within the configured memory threshold."""
