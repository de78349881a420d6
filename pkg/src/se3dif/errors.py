"""Exception types shared across modules."""

from __future__ import annotations


class Se3DifError(Exception):
    """Base class for all package errors."""

    code = "error"

    def machine_line(self) -> str:
        return f"ERROR\t{self.code}\t{self}"


class AngleNearPi(Se3DifError, ValueError):
    """A rotation angle is within 1e-6 of pi, where Logmap is ill-conditioned."""

    code = "angle_near_pi"

    def __init__(self, message: str = "rotation angle too close to pi", indices=None):
        super().__init__(message)
        self.indices = indices


class NonFiniteLoss(Se3DifError, FloatingPointError):
    code = "non_finite_loss"

    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


class NonFiniteCost(Se3DifError, FloatingPointError):
    code = "non_finite_cost"

    def __init__(self, particle: int):
        super().__init__(f"objective became non-finite for particle {particle}")
        self.particle = particle


class UnknownTerm(Se3DifError, KeyError):
    code = "unknown_term"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else "unknown cost term"


class ConfigError(Se3DifError, ValueError):
    code = "config_error"


class SchemaError(ConfigError):
    code = "schema_error"
