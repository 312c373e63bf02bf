"""Exception types shared across the toolkit."""


class GridSenseError(Exception):
    """Base class for all toolkit errors."""


class CaseValidationError(GridSenseError):
    """A case document violates a structural invariant.

    ``element`` names the offending bus/branch/switch so callers can point
    at the exact input line.
    """

    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class IslandedCaseError(GridSenseError):
    """Solver input contains buses disconnected from the slack."""

    def __init__(self, islanded_buses):
        super().__init__(f"case contains islanded buses: {sorted(islanded_buses)}")
        self.islanded_buses = tuple(sorted(islanded_buses))


class UnobservableInputError(GridSenseError):
    """A bus with nonzero injection has no meter and no pseudo-measurement."""

    def __init__(self, bus):
        super().__init__(f"bus {bus} has nonzero injection but no meter")
        self.bus = bus


class SingularSystemError(GridSenseError):
    """Sparse factorization failed; carries pivot diagnostics when known."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PowerFlowDivergence(GridSenseError):
    """Newton power flow failed to converge (the classic blackout signature)."""

    def __init__(self, iterations, residual, message=None):
        super().__init__(
            message
            or f"power flow diverged after {iterations} iterations "
            f"(residual {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


class SolverFailure(GridSenseError):
    """An optimization solve ended without reaching its tolerances."""

    def __init__(self, message, status="numerical_failure", diagnostics=None):
        super().__init__(message)
        self.status = status
        self.diagnostics = diagnostics or {}
