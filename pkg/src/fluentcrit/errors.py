"""Exception types raised by fluentcrit.

Everything user-facing derives from FluentCritError so callers (and the
CLI) can separate input/validation problems from genuine bugs.
"""


class FluentCritError(Exception):
    """Base class for all validation and input errors."""


class EmptyInput(FluentCritError):
    """An operation received empty data where content is required."""


class ConfigMismatch(FluentCritError):
    """Two objects carry incompatible configuration (sample rate, shape, ...)."""


class FormatError(FluentCritError):
    """A serialized artifact is malformed.

    ``offset`` is the byte offset (binary formats) at which the problem
    was detected, or None for structured text formats.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(FluentCritError):
    """A text input (TextGrid) could not be parsed.

    ``line`` is the 1-based line number of the offending input line.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateAlignment(FluentCritError):
    """A non-silent interval received no frames, or tiers are inconsistent."""


class NoWords(FluentCritError):
    """Mask selection needs at least one word."""


class MissingNeighbor(FluentCritError):
    """The masked span has no neighboring unit on the requested side."""


class ShapeError(FluentCritError):
    """Two spectrograms that must be frame-aligned have different shapes."""


class ZeroVector(FluentCritError):
    """Cosine similarity of a zero-length vector is undefined."""


class BatchTooSmall(FluentCritError):
    """The contrastive loss needs at least two batch items."""


class BadTemperature(FluentCritError):
    """The contrastive temperature must be strictly positive."""


class EmptyRegion(FluentCritError):
    """A prosody embedding was requested over an empty frame region."""


class EmptyContext(FluentCritError):
    """Interpolation needs at least one context frame on some side."""


class PlanMismatch(FluentCritError):
    """An edit plan's original word list disagrees with the alignment."""
