"""Exception hierarchy shared across the package.

Validation errors map to CLI exit code 2, numeric errors to exit code 3.
"""


class ValidationError(ValueError):
    """Bad inputs: shapes, ranges, malformed files, infeasible configs."""


class DimensionError(ValidationError):
    """Tensor shapes fail an operation's precondition."""


class FormatError(ValidationError):
    """A binary container failed to parse."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MarginalError(ValidationError):
    """Transport marginals are infeasible (mass mismatch or negatives)."""


class DegenerateMarginalError(ValidationError):
    """A target marginal cannot be built (e.g. all weight-change scores zero)."""


class InfeasiblePruneError(ValidationError):
    """Requested pruning would empty a layer."""

    def __init__(self, layer_index: int, message: str | None = None):
        super().__init__(message or f"pruning would remove every neuron of layer {layer_index}")
        self.layer_index = layer_index


class UnsupportedLayerError(ValidationError):
    """A neuron-level operation was applied to a layer without neurons."""


class EmptyInputError(ValidationError):
    """An evaluation set or batch is empty."""


class NumericError(RuntimeError):
    """Non-finite values or failed numeric iteration."""


class DivergenceError(NumericError):
    """Training or unlearning produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class ConvergenceError(NumericError):
    """An iterative solver hit its iteration cap before meeting tolerance."""

    def __init__(self, message: str, row_residual: float, col_residual: float):
        super().__init__(f"{message}: row residual {row_residual:.3e}, col residual {col_residual:.3e}")
        self.row_residual = row_residual
        self.col_residual = col_residual


class AlignmentError(ValidationError):
    """Model architectures cannot be aligned layer by layer."""
