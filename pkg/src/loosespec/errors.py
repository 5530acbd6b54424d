"""Exception hierarchy shared across the engine."""
from __future__ import annotations


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(EngineError):
    """An argument lies outside the mathematical domain of a formula."""


class ConfigError(EngineError):
    """A configuration object is internally inconsistent."""


class ZeroNormRow(EngineError):
    """A hidden-state row has zero norm, so its direction is undefined."""

    def __init__(self, matrix: str, row: int) -> None:
        super().__init__(f"zero-norm row {row} in {matrix}")
        self.matrix = matrix
        self.row = row


class MissingEntropy(EngineError):
    """A strategy needs per-position entropies the step does not carry."""


class MissingHidden(EngineError):
    """A strategy needs hidden states that are absent or empty."""


class TraceStrategyMismatch(EngineError):
    """A trace lacks fields the bound strategy requires."""


class VerdictTraceMismatch(EngineError):
    """Replay results do not line up with the trace they claim to describe."""


class EmptyStrategyList(EngineError):
    """A sweep was asked to evaluate zero strategies."""


class TraceIoError(EngineError):
    """Base class for trace serialization failures."""


class ParseError(TraceIoError):
    """A trace file line is malformed or out of order."""

    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class ChecksumMismatch(TraceIoError):
    """The end record's checksum does not match the preceding bytes."""

    def __init__(self, expected: str, actual: str) -> None:
        super().__init__(f"checksum mismatch: end record says {expected}, file hashes to {actual}")
        self.expected = expected
        self.actual = actual


class VersionUnsupported(TraceIoError):
    """The trace file declares a format version this reader does not speak."""

    def __init__(self, version: object) -> None:
        super().__init__(f"unsupported trace format version: {version!r}")
        self.version = version


class EncodingError(TraceIoError):
    """A float array cannot be encoded (non-finite values)."""


class ValidationFailed(TraceIoError):
    """A parsed trace violates domain invariants.

    Carries the full violation list so callers can report every problem
    at once instead of the first one hit.
    """

    def __init__(self, violations: tuple) -> None:
        lines = "; ".join(str(v) for v in violations[:8])
        more = "" if len(violations) <= 8 else f" (+{len(violations) - 8} more)"
        super().__init__(f"{len(violations)} invariant violation(s): {lines}{more}")
        self.violations = violations
