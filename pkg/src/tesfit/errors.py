"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


class ParameterError(ValueError):
    """A scalar argument lies outside its legal range."""


class DegenerateRowError(ValueError):
    """A row or proxy column has near-zero norm where a direction is required."""


class FormatError(ValueError):
    """An on-disk artifact is malformed; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EvaluationError(RuntimeError):
    """A user-supplied callable returned a non-finite value."""


class TrainingError(RuntimeError):
    """Optimization failed: non-finite loss or gradient, or divergence."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its budget; carries the final gradient norm."""

    def __init__(self, message: str, grad_norm: float):
        super().__init__(message)
        self.grad_norm = grad_norm
