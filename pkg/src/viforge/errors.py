"""Exception hierarchy shared by all viforge modules."""


class VIForgeError(Exception):
    """Base class for library errors."""


class InvalidArgumentError(VIForgeError, ValueError):
    pass


class NotPSDError(VIForgeError, ValueError):
    pass


class NumericOverflowError(VIForgeError, ArithmeticError):
    pass


class BudgetError(VIForgeError, RuntimeError):
    """An enumeration or iteration budget was exceeded."""


class ParseError(VIForgeError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class UndefinedVarianceError(VIForgeError, ValueError):
    pass


class ConfigError(VIForgeError, ValueError):
    pass
