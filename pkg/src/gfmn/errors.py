"""Exception hierarchy shared by every module.

Each error carries a short machine-readable ``code`` so the command line can
print one parsable line per failure.
"""

from __future__ import annotations


class GFMNError(Exception):
    code = "error"


class ShapeError(GFMNError, ValueError):
    """Raised when an operation receives an input of the wrong shape."""

    code = "shape"

    def __init__(self, node: str, expected, actual, detail: str = ""):
        self.node = node
        self.expected = expected
        self.actual = actual
        msg = f"{node}: expected shape {expected}, got {actual}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonScalarLossError(GFMNError, ValueError):
    code = "non-scalar-loss"


class ConfigError(GFMNError, ValueError):
    code = "config"


class FingerprintMismatch(GFMNError, ValueError):
    code = "fingerprint"


class DivergenceError(GFMNError, RuntimeError):
    """Training produced a non-finite loss.

    ``last_finite`` is the last finite loss seen and ``checkpoint`` the last
    checkpoint written before the failure (``None`` if there was none).
    """

    code = "diverged"

    def __init__(self, message: str, last_finite=None, checkpoint=None):
        super().__init__(message)
        self.last_finite = last_finite
        self.checkpoint = checkpoint


class FormatError(GFMNError, ValueError):
    code = "format"


class ConvergenceError(GFMNError, ArithmeticError):
    code = "convergence"
