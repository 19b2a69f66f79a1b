"""Exception hierarchy shared by every module."""


class TpsMotionError(Exception):
    """Base class for all library errors."""


class ContractError(TpsMotionError, ValueError):
    """An argument violates a documented precondition (shape, length, range)."""


class DomainError(ContractError):
    """A scalar argument lies outside the mathematical domain of a function."""


class DegenerateError(TpsMotionError, ArithmeticError):
    """A linear system is singular or too ill-conditioned to trust."""


class FlowFormatError(TpsMotionError, ValueError):
    """A flow file is malformed."""
