"""Exception hierarchy shared by every module."""


class SecGfdError(Exception):
    """Base class for all package errors."""


class InvalidInput(SecGfdError, ValueError):
    pass


class TooLarge(SecGfdError, ValueError):
    pass


class EmptyDenominator(SecGfdError, ZeroDivisionError):
    pass


class InternalError(SecGfdError, RuntimeError):
    pass


class ParseError(SecGfdError, ValueError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class SchemaError(SecGfdError, ValueError):
    pass


class InvalidValue(SecGfdError, ValueError):
    pass


class NotFound(SecGfdError, FileNotFoundError):
    pass


class Diverged(SecGfdError, ArithmeticError):
    def __init__(self, epoch, message="non-finite loss"):
        self.epoch = epoch
        super().__init__(f"{message} at epoch {epoch}")
