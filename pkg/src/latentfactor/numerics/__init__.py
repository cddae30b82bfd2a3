"""Tensor arithmetic, reverse-mode differentiation and dense linear algebra."""

from . import tensor as ops
from .linalg import (
    DecompositionError,
    chol_solve,
    cholesky,
    cholesky_np,
    inv_sqrt_psd,
    solve_triangular,
    sym_eig,
)
from .special import DomainError, digamma, lgamma
from .tensor import ShapeError, Tape, Tensor, as_tensor, backward, custom_op, grad_enabled

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "custom_op",
    "grad_enabled",
    "ShapeError",
    "DomainError",
    "DecompositionError",
    "cholesky",
    "cholesky_np",
    "solve_triangular",
    "sym_eig",
    "inv_sqrt_psd",
    "chol_solve",
    "lgamma",
    "digamma",
]
