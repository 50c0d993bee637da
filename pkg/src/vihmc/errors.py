"""Exception types. Exit codes follow the CLI convention."""


class VIHMCError(Exception):
    exit_code = 1


class ConfigurationError(VIHMCError, ValueError):
    """Bad shapes, inconsistent specs, malformed config files."""

    exit_code = 1


class NumericalError(VIHMCError, ArithmeticError):
    """Non-finite losses, unstable solvers, failed step-size bracketing."""

    exit_code = 2

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class QualityGateError(VIHMCError):
    """A run finished but its output failed a quality gate (e.g. all chains bad)."""

    exit_code = 3
