"""Exception and warning types shared across the package."""

from __future__ import annotations


class HwFairError(Exception):
    """Base class for all package errors."""


class EmptySubset(HwFairError):
    pass


class SchemaError(HwFairError):
    def __init__(self, column, message: str | None = None):
        self.column = column
        super().__init__(message or f"schema problem with column {column!r}")


class ParseError(HwFairError):
    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"cannot parse {value!r} at row {row}, column {column!r}")


class ShapeError(HwFairError):
    pass


class LayoutError(HwFairError):
    pass


class NumericalOverflow(HwFairError):
    def __init__(self, layer: str, message: str | None = None):
        self.layer = layer
        super().__init__(message or f"non-finite values produced in layer {layer!r}")


class ZeroDirection(HwFairError):
    pass


class OracleTooLarge(HwFairError):
    pass


class DegenerateSpec(HwFairError):
    pass


class UnsupportedHead(HwFairError):
    pass


class DivergedError(HwFairError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}, step {step} (loss={loss!r})")


class GradCheckFailure(HwFairError):
    def __init__(self, coordinate: int, analytic: float, numeric: float):
        self.coordinate = coordinate
        self.analytic = analytic
        self.numeric = numeric
        super().__init__(
            f"gradient check failed at coordinate {coordinate}: "
            f"analytic={analytic!r}, finite-difference={numeric!r}"
        )


class StudyFailed(HwFairError):
    pass


class ConfigError(HwFairError):
    pass


class IllConditionedWarning(RuntimeWarning):
    """Step-halving estimates of a Hessian-vector product disagree."""


class DiagnosticWarning(UserWarning):
    """A diagnostic was computed on a degenerate input (one group, one profile...)."""


class SplitWarning(UserWarning):
    pass
