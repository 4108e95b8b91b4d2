"""Exception hierarchy. Every error carries a machine-readable category."""


class MFStackError(Exception):
    category = "error"


class ValidationError(MFStackError):
    """A model or input violates a structural or definiteness requirement.

    ``violations`` holds one human-readable line per failed check.
    """

    category = "validation"

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NonSolvableError(MFStackError):
    category = "non-solvable"

    def __init__(self, message, t=None, min_singular=None):
        self.t = t
        self.min_singular = min_singular
        super().__init__(message)


class BlowUpError(MFStackError):
    """Non-finite value met during time integration."""

    category = "blow-up"

    def __init__(self, name, t):
        self.name = name
        self.t = float(t)
        super().__init__(f"{name}: non-finite value at t={self.t:.6g}")


class IOFailure(MFStackError):
    category = "io"
