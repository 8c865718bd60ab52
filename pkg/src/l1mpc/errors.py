"""Exception types raised by the solver library."""


class L1MpcError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(L1MpcError, ValueError):
    def __init__(self, name, message=None):
        self.name = name
        super().__init__(message or name)


class NonFinite(L1MpcError, ArithmeticError):
    pass


class NotPSD(L1MpcError, ValueError):
    pass


class NumericalFailure(L1MpcError, ArithmeticError):
    pass


class NotStabilizable(L1MpcError, ArithmeticError):
    pass


class NotDetectable(L1MpcError, ArithmeticError):
    pass


class Singular(L1MpcError, ArithmeticError):
    pass


class MaxIterReached(L1MpcError, RuntimeError):
    pass
