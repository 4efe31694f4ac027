"""Exception types raised across the toolkit."""

from __future__ import annotations


class VarlocalError(Exception):
    """Base class for all toolkit errors."""


class OutOfSmoothnessRegion(VarlocalError):
    """A derivative was requested where the Lagrangian is not C^2."""


class ZeroVariation(VarlocalError):
    """A variation with vanishing gradient norm cannot be rescaled."""


class NoConvergence(VarlocalError):
    """An iterative solver exhausted its budget.

    ``interval`` holds the best available bracket (lower, upper) when known.
    """

    def __init__(self, message: str, interval: tuple[float, float] | None = None):
        super().__init__(message)
        self.interval = interval


class InvalidBasePoint(VarlocalError):
    """A probe base point is not where the probe requires it to be."""


class AdmissibilityViolation(VarlocalError):
    """A variation does not vanish on the Dirichlet part of the boundary."""


class SupportEscapesDomain(AdmissibilityViolation):
    """A localized variation reaches outside the admissible region."""


class ResolutionTooCoarse(VarlocalError):
    """The grid cannot resolve the requested ball."""


class DegenerateSplit(VarlocalError):
    """The bad set of a Lipschitz split covers the whole domain."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class SplitMismatch(VarlocalError):
    """z + v does not reproduce psi."""


class ParseError(VarlocalError):
    """A scenario file could not be parsed."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.key = key


class ValidationError(VarlocalError):
    """A scenario parsed but holds an invalid value."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
