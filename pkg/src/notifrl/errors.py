"""Exception hierarchy. Each family maps to a CLI exit code."""


class NotifRLError(Exception):
    exit_code = 1


class ConfigError(NotifRLError, ValueError):
    exit_code = 1


class DataError(NotifRLError, ValueError):
    """Malformed or inconsistent data (schema mismatch, support violation...)."""

    exit_code = 2


class ShapeError(DataError):
    pass


class SupportError(DataError):
    """An importance weight would need a zero-probability denominator."""


class NumericalError(NotifRLError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericalError):
    def __init__(self, message: str, step: int | None = None, diagnostics: dict | None = None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}
