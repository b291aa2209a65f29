class NumericalError(ArithmeticError):
    """Raised when a factorization fails or non-finite values appear."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DegenerateModelError(ArithmeticError):
    """Predicted model decrease is too small for a meaningful ratio."""


class ConfigError(ValueError):
    """Invalid configuration; ``fields`` names every offending entry."""

    def __init__(self, fields):
        self.fields = dict(fields)
        detail = "; ".join(f"{k}: {v}" for k, v in self.fields.items())
        super().__init__(f"invalid configuration ({detail})")


class IdxFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
