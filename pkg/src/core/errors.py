"""Error hierarchy shared by every layer of the library."""

from typing import Optional


class LeasewireError(Exception):
    """Base class for all library errors."""

    code: str = "error"

    def __init__(self, message: Optional[str] = None):
        super().__init__(message or self.code)


class ScenarioError(LeasewireError):
    """A scenario references something that does not exist or is inconsistent."""

    code = "scenario-error"


class ParseError(ScenarioError):
    """Scenario text could not be parsed."""

    code = "parse-error"

    def __init__(self, line: int, message: str):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}")


class InvalidLeaseName(LeasewireError, ValueError):
    code = "invalid-lease-name"


class LockServiceError(LeasewireError):
    """Base class for lease directory refusals."""


class LeaseHeldError(LockServiceError):
    code = "held"


class NotOwnerError(LockServiceError):
    code = "not-owner"


class NoOwnerError(LockServiceError):
    code = "no-owner"


class ResolutionFailed(LeasewireError):
    """No resolver stage produced a target."""

    code = "resolution-failed"


class OwnerUnavailable(ResolutionFailed):
    """The name exists but nobody holds its lease right now."""


class CallExhausted(LeasewireError):
    """A call ran out of attempts or of its overall deadline."""

    code = "exhausted"

    def __init__(self, message: str, attempts: int = 0):
        self.attempts = attempts
        super().__init__(message)


class MalformedFrame(LeasewireError, ValueError):
    code = "malformed-frame"


class BadSplit(LeasewireError, ValueError):
    code = "bad-split"
