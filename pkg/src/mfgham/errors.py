"""Exception taxonomy shared across the solver modules.

Every error raised on purpose by this package derives from MfghamError so
callers (and the CLI) can distinguish our failures from genuine bugs.
"""


class MfghamError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MfghamError):
    """A configuration file or override could not be parsed or validated."""


class EmptyData(MfghamError):
    """A dataset or regression problem contained no usable samples."""


class InvalidBounds(MfghamError):
    """A bound parameter (Lipschitz constant, value cap, box edge) is not valid."""


class DimensionMismatch(MfghamError):
    """Array shapes disagree with the declared input dimension."""


class InvariantViolation(MfghamError):
    """An internal structural invariant failed a runtime check."""


class EmptyInterval(MfghamError):
    """An interval was requested with lower endpoint above the upper one."""


class OutOfFeasible(MfghamError):
    """An action lies outside the feasible savings interval of its state."""


class InfeasibleAction(MfghamError):
    """A reward was requested for an action that violates the budget set."""


class IterationDiverged(MfghamError):
    """The equilibrium iteration left the price box by a wide margin."""


class OracleNoConvergence(MfghamError):
    """The reference fixed-point iteration hit its round limit."""


class InsufficientTrajectory(MfghamError):
    """Too few trajectory points to compute the requested diagnostic."""


class DegenerateInput(MfghamError):
    """A statistical routine received input it cannot identify a model from."""
