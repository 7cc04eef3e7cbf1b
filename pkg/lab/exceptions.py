class RouteLabError(Exception):
    """Base error for laboratory services"""


class DomainError(RouteLabError, ValueError):
    """Input outside the mathematical domain of an operation"""


class UsageError(RouteLabError, ValueError):
    """Malformed request: empty inputs, bad ranges, unsorted grids"""


class NoInteriorOptimum(RouteLabError):
    """No sign change of rho - lambda*kappa inside the bracket"""

    def __init__(self, message: str, fallback_tau: float):
        super().__init__(message)
        self.fallback_tau = fallback_tau


class TraceExhausted(RouteLabError):
    """Network trace ran out of states before the run finished"""

    def __init__(self, needed: int, available: int):
        super().__init__(
            f"Trace exhausted: needed state #{needed + 1} but trace has {available} states "
            f"(short by at least {needed + 1 - available})"
        )
        self.needed = needed
        self.available = available
