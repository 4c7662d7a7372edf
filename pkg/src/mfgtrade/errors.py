"""Exception hierarchy shared by the solvers, simulators and the CLI."""


class MFGError(Exception):
    """Base class; ``code`` is the CLI exit status for this failure kind."""

    code = 1
    kind = "error"


class ParameterError(MFGError, ValueError):
    code = 2
    kind = "invalid_parameters"


class SchemaError(MFGError, ValueError):
    code = 2
    kind = "schema_violation"


class UnitMismatchError(SchemaError):
    code = 3
    kind = "unit_mismatch"


class MissingInputError(MFGError):
    code = 4
    kind = "missing_input"


class SolverError(MFGError, RuntimeError):
    code = 5
    kind = "solver_failure"


class DivergenceError(SolverError):
    """Fixed-point iteration stopped contracting.

    ``history`` holds the residual sequence up to the failure.
    """

    kind = "divergence"

    def __init__(self, message, history=(), coupling=None):
        super().__init__(message)
        self.history = list(history)
        self.coupling = coupling


class PanelError(MFGError, ValueError):
    """Malformed or inconsistent panel data; ``line`` is 1-based when known."""

    code = 6
    kind = "panel_error"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EstimationError(MFGError, ValueError):
    code = 7
    kind = "estimation_error"
