"""Exception types shared across the solver pipeline.

Each error carries a machine-parsable ``code`` (emitted on stderr by the CLI)
and the process exit status the CLI maps it to.
"""


class LumenError(Exception):
    code = "error"
    exit_status = 1


class ConfigError(LumenError):
    """Bad or unknown configuration content (strict parsing)."""

    code = "config-error"
    exit_status = 1


class FeasibilityError(LumenError):
    """Energy condition violated: not enough input flux for the target."""

    code = "feasibility-error"
    exit_status = 2

    def __init__(self, message, margin=None):
        super().__init__(message)
        self.margin = margin


class ConvergenceError(LumenError):
    """Sweep iteration exhausted without meeting the residual tolerance."""

    code = "convergence-error"
    exit_status = 3

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class FloorError(ConvergenceError):
    """A focal parameter hit its admissibility floor with its target mass
    still unmet; signals geometric crowding or inconsistent configuration."""

    code = "floor-error"
    exit_status = 3


class MinimalityViolation(LumenError):
    """Re-solves with permuted sweep orders disagreed on the focal vector."""

    code = "minimality-violation"
    exit_status = 3

    def __init__(self, message, w_reference=None, w_other=None):
        super().__init__(message)
        self.w_reference = w_reference
        self.w_other = w_other


class NumericError(LumenError):
    """Non-finite value met where a finite one is required."""

    code = "numeric-error"
    exit_status = 1


class IoError(LumenError):
    code = "io-error"
    exit_status = 1
