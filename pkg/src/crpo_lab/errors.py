"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class CrpoLabError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(CrpoLabError, ValueError):
    """A record does not match its expected shape or schema version."""


class MissingLatentQuality(CrpoLabError):
    pass


class QueryMismatch(CrpoLabError):
    pass


class JudgeUnavailable(CrpoLabError):
    """The judge endpoint could not be reached after all retry attempts."""


class UnparseableVerdict(CrpoLabError):
    """The judge answered, but without a usable verdict block."""


class MissingCounterpartResponse(CrpoLabError, KeyError):
    pass


class UnresolvedInvalidCells(CrpoLabError):
    pass


class GroupTooSmall(CrpoLabError, ValueError):
    pass


class UnknownQuery(CrpoLabError, KeyError):
    pass


class NonFiniteLoss(CrpoLabError, FloatingPointError):
    pass


class MissingBaselineResponse(CrpoLabError, KeyError):
    pass


class EmptyJudgmentSet(CrpoLabError, ValueError):
    pass


class DanglingLabel(CrpoLabError, KeyError):
    pass


class EmptyCorpus(CrpoLabError, ValueError):
    pass


class ConfigError(CrpoLabError, ValueError):
    """Invalid or incomplete run configuration; carries the offending key path."""

    def __init__(self, message: str, key_path: str | None = None):
        super().__init__(message if key_path is None else f"{key_path}: {message}")
        self.key_path = key_path
