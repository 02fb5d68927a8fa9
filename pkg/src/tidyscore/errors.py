"""Exception hierarchy shared across modules."""
from __future__ import annotations


class TidyError(Exception):
    """Base class for all package errors."""


class InvalidArgument(TidyError, ValueError):
    pass


class PlacementRejected(TidyError):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class NotFound(TidyError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


class InvalidScene(TidyError, ValueError):
    pass


class CapacityExceeded(TidyError):
    pass


class LayoutInfeasible(TidyError):
    pass


class NumericError(TidyError, ArithmeticError):
    pass


class DanglingReference(TidyError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "dangling reference"


class CorruptCheckpoint(TidyError):
    pass


class CorruptDataset(TidyError):
    pass


class ParseFailure(TidyError):
    def __init__(self, message: str, diagnostics: list[str] | None = None):
        self.diagnostics = list(diagnostics or [])
        full = message
        if self.diagnostics:
            full += "\n" + "\n".join(self.diagnostics)
        super().__init__(full)


class MissingAnchor(TidyError):
    pass


class GroundingInfeasible(TidyError):
    pass


class ConfigError(TidyError):
    pass


class LlmUnavailable(TidyError):
    pass


class LlmError(TidyError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        super().__init__(f"LLM endpoint returned HTTP {status}: {body[:200]}")
