"""Exception types raised across the package."""

from __future__ import annotations


class FedCmpError(Exception):
    """Base class for all package errors."""


# numerical layer
class SingularSystem(FedCmpError):
    pass


class DidNotConverge(FedCmpError):
    pass


class Diverged(FedCmpError):
    pass


# data / model layer
class DimensionMismatch(FedCmpError, ValueError):
    pass


class MissingValues(FedCmpError, ValueError):
    pass


class DegenerateFeatures(FedCmpError):
    pass


class DegenerateCovariate(FedCmpError):
    pass


class InfeasibleTarget(FedCmpError):
    """Calibration target lies outside what the source sample can reach.

    ``source`` and ``target`` carry the site ids when known.
    """

    def __init__(self, message: str, source=None, target=None):
        super().__init__(message)
        self.source = source
        self.target = target


# estimator layer
class UnknownSite(FedCmpError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class EmptySubset(FedCmpError, ValueError):
    pass


class SameComparators(FedCmpError, ValueError):
    pass


class MissingModel(FedCmpError):
    pass


class MissingWeights(FedCmpError):
    pass


# protocol layer
class SchemaViolation(FedCmpError):
    pass


class VersionMismatch(SchemaViolation):
    pass


class SessionAborted(FedCmpError):
    pass


# operator layer
class ConfigError(FedCmpError):
    pass


class ReplicateFailed(FedCmpError):
    """A simulation replicate failed; ``rep`` is its index."""

    def __init__(self, message: str, rep: int | None = None):
        super().__init__(message)
        self.rep = rep

    def __reduce__(self):
        return (type(self), (str(self), self.rep))
