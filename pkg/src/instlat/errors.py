"""Error taxonomy shared by all instlat modules.

Every failure that a caller may want to branch on is a subclass of
InstlatError carrying a machine-readable payload (module, operation,
residual) so the CLI can serialize it without string parsing.
"""

from __future__ import annotations

__all__ = [
    "InstlatError",
    "BranchCut",
    "NoSolution",
    "NonConvergence",
    "SpectralGapTooSmall",
    "Reducible",
    "InvalidGenusSequence",
    "NotNearInteger",
    "LiftAmbiguous",
    "NotCompatible",
    "SearchExhausted",
    "ConvergedToReducible",
    "CrossingUnresolved",
    "Blowup",
    "BudgetExceeded",
    "NoMatch",
    "GradingMismatch",
    "InconclusiveClustering",
    "NotCompatiblePerturbation",
    "SeamMismatch",
    "GaugePathNotFound",
    "ConfigError",
]


class InstlatError(Exception):
    """Base class. `module`/`operation` locate the failure, `residual` is
    whatever scalar best quantifies how badly the contract was missed."""

    def __init__(self, message, module="", operation="", residual=None, **extra):
        super().__init__(message)
        self.module = module
        self.operation = operation
        self.residual = residual
        self.extra = extra

    def payload(self) -> dict:
        out = {
            "error": type(self).__name__,
            "message": str(self),
            "module": self.module,
            "operation": self.operation,
            "residual": self.residual,
        }
        out.update(self.extra)
        return out


class BranchCut(InstlatError):
    pass


class NoSolution(InstlatError):
    pass


class NonConvergence(InstlatError):
    pass


class SpectralGapTooSmall(InstlatError):
    pass


class Reducible(InstlatError):
    pass


class InvalidGenusSequence(InstlatError):
    pass


class NotNearInteger(InstlatError):
    pass


class LiftAmbiguous(InstlatError):
    pass


class NotCompatible(InstlatError):
    pass


class SearchExhausted(InstlatError):
    pass


class ConvergedToReducible(InstlatError):
    pass


class CrossingUnresolved(InstlatError):
    pass


class Blowup(InstlatError):
    pass


class BudgetExceeded(InstlatError):
    pass


class NoMatch(InstlatError):
    pass


class GradingMismatch(InstlatError):
    pass


class InconclusiveClustering(InstlatError):
    pass


class NotCompatiblePerturbation(InstlatError):
    pass


class SeamMismatch(InstlatError):
    pass


class GaugePathNotFound(InstlatError):
    pass


class ConfigError(InstlatError):
    pass
