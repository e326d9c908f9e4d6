"""Exception types shared across the package.

Every error raised on purpose derives from :class:`MvsWhitenError`, so callers
can catch one base class at tool boundaries and still tell input mistakes
apart from numerical blow-ups.
"""

from __future__ import annotations


class MvsWhitenError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MvsWhitenError, ValueError):
    """Operands have incompatible shapes or an unexpected rank."""


class ContractError(MvsWhitenError, ValueError):
    """An argument violates a documented precondition."""


class ValidationError(MvsWhitenError, ValueError):
    """A constructed object fails its own consistency checks.

    Used for things like camera poses whose rotation block is not orthonormal;
    the message names the offending quantity and its residual.
    """


class NumericalError(MvsWhitenError, ArithmeticError):
    """A computation produced NaN/Inf or lost required numerical structure."""


class ParseError(MvsWhitenError, ValueError):
    """A file could not be decoded.

    Carries the position (byte offset or line number, whichever is natural
    for the format) so a bad file can be inspected by hand.
    """

    def __init__(self, message: str, *, position: int | None = None,
                 unit: str = "byte") -> None:
        self.position = position
        self.unit = unit
        if position is not None:
            message = f"{message} (at {unit} {position})"
        super().__init__(message)
