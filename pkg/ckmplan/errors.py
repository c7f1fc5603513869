from typing import List, Optional


class CkmPlanError(Exception):
    """Base class for every error raised by ckmplan."""


class SceneError(CkmPlanError, ValueError):
    """Invalid scene, grid shape or file contents."""


class CacheError(CkmPlanError, RuntimeError):
    """A forward result (encoder output or activations) is required but missing."""


class NumericalError(CkmPlanError, RuntimeError):
    """Non-finite values, training divergence or a failed numerical routine."""


class InfeasibleError(CkmPlanError):
    """A plan or subproblem cannot satisfy its constraints.

    Args:
        message: Human readable summary.
        violations: One entry per violated constraint or slot.
    """

    def __init__(self, message: str, violations: Optional[List[str]] = None) -> None:
        self.violations = list(violations or [])
        if self.violations:
            message = message + ": " + "; ".join(self.violations[:20])
            if len(self.violations) > 20:
                message += f"; ... ({len(self.violations) - 20} more)"
        super().__init__(message)
