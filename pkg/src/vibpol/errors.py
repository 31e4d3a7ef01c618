"""Exception hierarchy shared by the solvers and the command line."""


class VibpolError(Exception):
    """Base class for all package errors."""


class ConfigurationError(VibpolError, ValueError):
    """Invalid parameters, mismatched array shapes or malformed config files."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class InstabilityError(VibpolError, ArithmeticError):
    """A force-constant matrix acquired a negative eigenvalue."""


class ConvergenceError(VibpolError, RuntimeError):
    """A self-consistent iteration did not reach its tolerance."""

    def __init__(self, message, history=()):
        self.history = list(history)
        super().__init__(message)


class IncommensurateError(ConfigurationError):
    """Requested wavevector is not representable on the simulation supercell."""
