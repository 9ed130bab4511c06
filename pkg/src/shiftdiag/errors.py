"""Exception hierarchy shared across the engine.

Errors are grouped by how callers (CLI exit codes, HTTP status mapping)
need to distinguish them: input problems, numerically infeasible or
singular problems, and failures of the selection adjustment.
"""

from __future__ import annotations


class ShiftDiagError(Exception):
    """Base class for all engine errors."""


class ValidationError(ShiftDiagError):
    """Invalid input data or analysis specification.

    Carries the offending row (1-based, header excluded) and/or column
    name when the problem is localized.
    """

    def __init__(self, message: str, *, row: int | None = None, column: str | None = None):
        where = []
        if column is not None:
            where.append(f"column {column!r}")
        if row is not None:
            where.append(f"row {row}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class EstimationError(ShiftDiagError):
    """Numerical failure: infeasible constraints or singular designs."""


class SingularDesignError(EstimationError):
    """Design matrix rank-deficient in a way that breaks the target coefficient."""

    def __init__(self, message: str, columns: tuple[str, ...] = ()):
        if columns:
            message = f"{message}: {', '.join(columns)}"
        super().__init__(message)
        self.columns = columns


class BalanceError(EstimationError):
    """Base class for entropy-balancing failures."""


class InfeasibleBalanceError(BalanceError):
    """Moment constraints cannot be met by any reweighting of D2.

    ``constraint`` names the worst-violated moment.
    """

    def __init__(self, message: str, constraint: str | None = None, residual: float | None = None):
        if constraint is not None:
            message = f"{message} (worst constraint: {constraint}"
            if residual is not None:
                message += f", residual {residual:.3e}"
            message += ")"
        super().__init__(message)
        self.constraint = constraint
        self.residual = residual


class DegenerateFeaturesError(BalanceError):
    """All balancing features are constant across D2 units."""


class AdjustmentError(ShiftDiagError):
    """Selection adjustment could not be computed."""


class SelectionEventError(AdjustmentError):
    """The declared selection event did not occur on the original study."""


class TruncationMassError(AdjustmentError):
    """Truncation set has numerically zero probability mass."""


class MleConvergenceError(AdjustmentError):
    """Selective likelihood maximization did not converge.

    ``best`` holds the best iterate found, for diagnostics.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class JackknifeError(EstimationError):
    """Too many delete-1 replicates failed to produce a covariance."""
