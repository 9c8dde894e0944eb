from __future__ import annotations


class EsdidError(Exception):
    exit_code = 1


class InputError(EsdidError, ValueError):
    """Unreadable or malformed input data."""

    exit_code = 2


class UsageError(InputError):
    """Conflicting or out-of-range options."""


class DesignRestrictionViolation(EsdidError):
    exit_code = 3

    def __init__(self, reason: str, hint: str | None = None) -> None:
        self.reason = reason
        self.hint = hint
        message = reason if hint is None else f"{reason}; {hint}"
        super().__init__(message)


class EstimationError(EsdidError):
    """No switcher or horizon survives the design filters."""

    exit_code = 3
