"""Exception hierarchy shared across the package."""


class PariError(Exception):
    """Base class for all errors raised by pariconv."""


class ParameterError(PariError, ValueError):
    """An argument is outside its documented range."""


class ShapeError(PariError, ValueError):
    pass


class BoundsError(PariError, IndexError):
    pass


class EstimationError(PariError):
    """Normal estimation failed for a specific point."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateAxesError(PariError):
    """The two axes handed to orthonormalization are (nearly) parallel."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InvalidPairError(PariError, ValueError):
    pass


class ParseError(PariError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StaleTapeError(PariError, RuntimeError):
    pass


class DivergenceError(PariError, FloatingPointError):
    pass


class CheckpointError(PariError):
    pass


class ContractError(PariError):
    pass
