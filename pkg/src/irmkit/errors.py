"""Exception types shared across the package."""


class SingularGramError(ValueError):
    """Normal-equation Gram matrix is singular and no ridge was supplied."""


class UnknownSetupError(ValueError):
    """Setup code is not one of the eight {F,P}x{O,E}x{U,S} combinations."""


class NotOrthogonalError(ValueError):
    """Supplied gradients are not orthogonal to the candidate predictor."""


class IdxFormatError(ValueError):
    """IDX payload is malformed; carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the step index."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (at step {step})"
        super().__init__(message)
        self.step = step
