"""Exception types and warning counters shared across the package."""

from __future__ import annotations

from collections import Counter


class FedemdError(Exception):
    """Base class for package-specific failures."""


class ConfigError(FedemdError):
    """Invalid configuration, architecture, or layer wiring."""


class NumericError(FedemdError):
    """A computation produced non-finite values.

    `layer` names the first operation that went non-finite, when known.
    """

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


class SolverError(FedemdError):
    """The transport solver failed to converge within its iteration budget."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class DegeneracyError(SolverError):
    """KKT system singular even after ridge regularization."""


class ProtocolError(FedemdError):
    """Federation protocol violation (empty silo dataset, bad round state)."""


# Soft failures that are repaired in place (clamped probabilities, zero-norm
# feature rows, ...) bump a named counter instead of raising, so tests and
# the verify suites can assert they happened.
warning_counters: Counter = Counter()


def warn_count(name: str) -> None:
    warning_counters[name] += 1


def reset_warning_counters() -> None:
    warning_counters.clear()
