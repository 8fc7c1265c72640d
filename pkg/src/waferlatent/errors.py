"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An operation was called with arguments outside its contract."""


class NonFiniteError(FloatingPointError):
    """A forward computation produced NaN or infinity."""


class ParseError(ValueError):
    """A dataset record could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
