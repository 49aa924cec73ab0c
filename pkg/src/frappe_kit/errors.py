"""Exception hierarchy shared by every module."""


class FrappeError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(FrappeError, ValueError):
    pass


class ParseError(FrappeError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyDataset(FrappeError, ValueError):
    pass


class SplitTooSmall(FrappeError, ValueError):
    pass


class InvalidFraction(FrappeError, ValueError):
    pass


class DimError(FrappeError, ValueError):
    pass


class MissingBaseScores(FrappeError, ValueError):
    pass


class EmptyGroup(FrappeError, ValueError):
    """A (label, group) cell that an estimator needs has no rows."""

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class InsufficientSample(FrappeError, ValueError):
    pass


class DivergedError(FrappeError, ArithmeticError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class InnerNotConverged(FrappeError, ArithmeticError):
    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm
