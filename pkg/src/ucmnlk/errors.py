"""Exception hierarchy. Each family maps to one CLI exit code."""


class UcmnlkError(Exception):
    exit_code = 1


class ConfigError(UcmnlkError, ValueError):
    """Bad user input: configuration, instance file, or parameters."""

    exit_code = 2


class DomainError(ConfigError, IndexError):
    """A state/action pair outside the model."""


class InstanceError(ConfigError):
    """An MDP instance (file or object) violates a structural invariant.

    ``diagnostics`` is a list of human-readable lines, each pointing at the
    offending location when one is known.
    """

    def __init__(self, message, diagnostics=None):
        self.diagnostics = list(diagnostics or [])
        if self.diagnostics:
            message = message + "\n" + "\n".join("  " + d for d in self.diagnostics)
        super().__init__(message)


class PreconditionError(ConfigError):
    """Hard-instance parameters outside the regime where the construction is valid."""


class AggregationError(ConfigError):
    """Per-seed result files cannot be combined."""


class NumericalError(UcmnlkError, ArithmeticError):
    exit_code = 3


class OracleError(UcmnlkError):
    """Exact solver could not produce ground truth (infeasible or non-convergent)."""

    exit_code = 4


class DiameterInfiniteError(OracleError):
    """Some state cannot be reached from another: the MDP is not communicating."""
