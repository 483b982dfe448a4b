"""Dense numerics: parameter vectors, reduced losses and gradients, HVPs, eigenvalues."""

from .eigen import EigenResult, LinearOperator, max_eigenvalue, max_eigenvalues
from .hessian import fd_hvp_rows, full_hessian, hvp, hvp_operator
from .ops import (
    finite_difference_gradient,
    gradient,
    loss,
    loss_and_gradient,
    relative_errors,
)
from .params import Block, Layout, ParamVector

__all__ = [
    "Block",
    "EigenResult",
    "Layout",
    "LinearOperator",
    "ParamVector",
    "fd_hvp_rows",
    "finite_difference_gradient",
    "full_hessian",
    "gradient",
    "hvp",
    "hvp_operator",
    "loss",
    "loss_and_gradient",
    "max_eigenvalue",
    "max_eigenvalues",
    "relative_errors",
]
