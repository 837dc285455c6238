"""Exception types shared across the package."""


class InputError(ValueError):
    """Rejected input: wrong shape, out-of-range id, empty batch."""


class ConfigError(InputError):
    """Invalid configuration value or combination."""


class FormatError(InputError):
    """Malformed file: bad magic, unknown version, truncated payload."""


class UnsupportedShapeError(InputError):
    """Operation refused for this tensor shape."""


class FactorizationError(ArithmeticError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix not positive definite: pivot {pivot} is {value:.6g}")
