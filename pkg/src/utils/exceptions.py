"""
Exception hierarchy for jetplan
"""
from typing import Optional


class JetPlanError(Exception):
    """Root of all jetplan errors"""


class InvalidArgumentError(JetPlanError, ValueError):
    """Bad argument: dimension mismatch, empty counts, out-of-span queries"""


class NumericalError(JetPlanError, ArithmeticError):
    """Singular or ill-conditioned linear algebra"""


class DivergenceError(NumericalError):
    """Fixed-point iteration failed to converge"""


class InvalidBeliefError(JetPlanError, ValueError):
    """A belief has zero or negative total mass"""


class CapacityError(JetPlanError):
    """More tracked objects than robots"""


class InfeasibleAssignmentError(JetPlanError):
    """Some tracked object cannot be reached by any robot within the horizon"""

    def __init__(self, message: str, track_ids=None):
        super().__init__(message)
        self.track_ids = list(track_ids or [])


class InfeasiblePathError(JetPlanError):
    """The path goal cannot be reached under the robot dynamics"""


class ConfigError(JetPlanError, ValueError):
    """Scenario configuration could not be parsed or validated"""

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        prefix = ""
        if source:
            prefix = f"{source}:"
        if line is not None:
            prefix = f"{prefix}{line}: "
        elif prefix:
            prefix = f"{prefix} "
        super().__init__(f"{prefix}{message}")
