"""Exception hierarchy shared across the package."""


class CookieWalkError(Exception):
    """Base class for all package-specific errors."""


# -- environment validation -------------------------------------------------

class NonStochasticRow(CookieWalkError):
    """A kernel row does not sum to 1 within tolerance."""

    def __init__(self, row: int, row_sum: float):
        self.row = row
        self.row_sum = row_sum
        super().__init__(f"kernel row {row} sums to {row_sum!r}, expected 1")


class NotElliptic(CookieWalkError):
    """A stack entry lies outside the open interval (0, 1)."""


class Reducible(CookieWalkError):
    """The kernel's support graph is not strongly connected."""


class Periodic(CookieWalkError):
    """The kernel is irreducible but has period > 1."""


class BadInitial(CookieWalkError):
    """The initial law is not a probability vector over the states."""


class NoConvergence(CookieWalkError):
    """An iterative solver failed to reach tolerance within its step cap."""


class TwoSidedNonStationary(CookieWalkError):
    """Negative site requested in strict mode while the initial law is not stationary."""


class UnknownName(CookieWalkError):
    """Requested builtin environment name does not exist."""


class BadParams(CookieWalkError):
    """Builtin environment parameters are malformed."""


# -- simulation -------------------------------------------------------------

class StepCapExceeded(CookieWalkError):
    """A simulation exceeded its hard step cap."""


class Truncated(CookieWalkError):
    """An operation requires a complete (non-truncated) path."""


class PhaseGuard(CookieWalkError):
    """The requested operation is only meaningful in a different drift phase."""


class RegimeMismatch(CookieWalkError):
    """Requested limit-law regime is inconsistent with the spec's drift."""


# -- exact computation ------------------------------------------------------

class CapTooSmall(CookieWalkError):
    """Level cap leaks too much probability mass for the requested computation."""


class SolveFailure(CookieWalkError):
    """A linear solve failed or returned a non-physical result."""


# -- statistics -------------------------------------------------------------

class TooFewSamples(CookieWalkError):
    """Not enough uncensored samples for the requested fit."""


class DegenerateWindow(CookieWalkError):
    """Fit window is empty or collapses to a single value."""


class BadA(CookieWalkError):
    """Lyapunov criterion parameter must satisfy a > 1."""


# -- CLI --------------------------------------------------------------------

class ConfigError(CookieWalkError):
    """Experiment configuration is unusable."""
