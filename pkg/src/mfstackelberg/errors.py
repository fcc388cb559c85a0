"""Exception types. Each maps to a distinct CLI exit code."""


class MFError(Exception):
    exit_code = 1


class ModelParseError(MFError):
    exit_code = 3


class ModelValidationError(MFError):
    exit_code = 4

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid model: " + "; ".join(self.violations))


class NotSolvableError(MFError):
    """Riccati blow-up (or singular weight) before reaching t=0."""

    exit_code = 5

    def __init__(self, message, t=None):
        self.t = t
        if t is not None:
            message = f"{message} at t={t:.6g}"
        super().__init__(message)


class SingularityError(NotSolvableError):
    pass


class SimulationDivergedError(MFError):
    exit_code = 6

    def __init__(self, path, t):
        self.path = path
        self.t = t
        super().__init__(f"simulation diverged on path {path} at t={t:.6g}")


class ConfigError(MFError, ValueError):
    """Invalid run configuration (follower count, paths, steps, ...)."""

    exit_code = 4


class ReproducibilityError(MFError):
    """A rerun from a manifest did not reproduce the recorded outputs."""

    exit_code = 7
