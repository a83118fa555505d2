"""Exceptions raised by the attack toolkit. Only the CLI catches them."""
from typing import Any, Optional


class QebaError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(QebaError, ValueError):
    pass


class InfeasibleError(QebaError, ValueError):
    pass


class DegenerateVictimError(QebaError, ValueError):
    pass


class DomainError(QebaError, ValueError):
    pass


class ContractError(QebaError):
    """A documented precondition does not hold."""


class UnsupportedShapeError(QebaError, ValueError):
    pass


class BoundVacuousError(QebaError):
    """w = L*delta / (2*||grad S||) >= 1, the lower bound says nothing."""

    def __init__(self, w: float):
        super().__init__(f"bound is vacuous: w = {w:.6g} >= 1")
        self.w = w


class ConvergedSignal(QebaError):
    """The iterate reached the target; delta_t would vanish."""


class QueryBudgetExceeded(QebaError):
    """
    The oracle refused a query. `count` is the number of queries already
    answered; `partial` optionally carries the best adversarial state the
    interrupted routine had when the budget ran out.
    """

    def __init__(self, count: int, partial: Optional[Any] = None):
        super().__init__(f"query budget exhausted after {count} queries")
        self.count = count
        self.partial = partial


class ParseError(QebaError, ValueError):
    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(QebaError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"invalid config field '{field}': {message}")
        self.field = field


class DegenerateBasisError(QebaError, ValueError):
    pass
