"""Exception hierarchy shared by every module."""

from __future__ import annotations


class SJDVPError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(SJDVPError, ValueError):
    """An argument violates a documented precondition."""


class InternalLogicError(SJDVPError, RuntimeError):
    """A state that correct callers can never reach (indicates a bug upstream)."""


class ResourceLimitError(SJDVPError, RuntimeError):
    """A request would exceed a hard size limit (enumeration, table size)."""


class ConfigError(SJDVPError, ValueError):
    """An experiment or drafter configuration is invalid."""


class SafetyValveError(SJDVPError, RuntimeError):
    """A decode loop exceeded its iteration budget and was aborted."""


class AnalysisInputError(SJDVPError, ValueError):
    """A trajectory log is malformed or mixes incompatible runs."""
