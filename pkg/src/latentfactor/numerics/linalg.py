"""Cholesky, triangular solves and symmetric eigendecomposition.

Dense kernels come from LAPACK (via numpy/scipy); this module adds the
contract checks and the reverse-mode rules so the factorizations can sit on a
training tape.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack, solve_triangular as _solve_tri

from .tensor import Tensor, ShapeError, as_tensor, custom_op

SYMMETRY_TOL = 1e-10


class DecompositionError(np.linalg.LinAlgError):
    """A factorization failed; ``pivot`` is the 0-based failing index when known."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


def _check_square(a: np.ndarray, name: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} expects a square matrix, got shape {a.shape}")


def _check_symmetric(a: np.ndarray, name: str, tol: float = SYMMETRY_TOL) -> None:
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > tol * scale:
        raise ValueError(f"{name}: matrix is not symmetric within {tol:g}")


def cholesky_np(a: np.ndarray, check_symmetric: bool = True) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite array."""
    a = np.asarray(a, dtype=np.float64)
    _check_square(a, "cholesky")
    if check_symmetric:
        _check_symmetric(a, "cholesky")
    if not np.all(np.isfinite(a)):
        raise DecompositionError("cholesky: matrix has non-finite entries")
    if a.shape[0] == 0:
        return a.copy()
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise DecompositionError(
            f"cholesky: leading minor {info} is not positive definite (pivot index {info - 1})",
            pivot=info - 1,
        )
    if info < 0:
        raise DecompositionError(f"cholesky: LAPACK argument error {info}")
    return np.tril(c)


def _phi(x: np.ndarray) -> np.ndarray:
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a) -> Tensor:
    """Differentiable Cholesky factor ``L`` with ``L @ L.T == a``.

    The adjoint assumes symmetric perturbations of ``a`` (the returned
    gradient is symmetric), which is what every caller in this package feeds.
    """
    a = as_tensor(a)
    L = cholesky_np(a.data)

    def bw(g):
        P = _phi(L.T @ g)
        # S = L^{-T} P L^{-1}
        tmp = _solve_tri(L, P, lower=True, trans="T")
        S = _solve_tri(L, tmp.T, lower=True, trans="T").T
        return (0.5 * (S + S.T),)

    return custom_op(L, (a,), bw)


def solve_triangular(L, b, lower: bool = True, trans: bool = False) -> Tensor:
    """Solve ``L x = b`` (or ``L.T x = b`` when ``trans``) for lower-triangular ``L``."""
    if not lower:
        raise NotImplementedError("only lower-triangular factors are used")
    L, b = as_tensor(L), as_tensor(b)
    _check_square(L.data, "solve_triangular")
    if b.shape[0] != L.shape[0]:
        raise ShapeError(f"solve_triangular: {L.shape} vs rhs {b.shape}")
    Ld = L.data
    x = _solve_tri(Ld, b.data, lower=True, trans="T" if trans else "N")

    def bw(g):
        gb = _solve_tri(Ld, g, lower=True, trans="N" if trans else "T")
        g2 = gb if gb.ndim == 2 else gb[:, None]
        x2 = x if x.ndim == 2 else x[:, None]
        gL = -(x2 @ g2.T) if trans else -(g2 @ x2.T)
        return np.tril(gL), gb

    return custom_op(x, (L, b), bw)


def sym_eig(a, check_symmetric: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    _check_square(a, "sym_eig")
    if check_symmetric:
        _check_symmetric(a, "sym_eig")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return w, v


def inv_sqrt_psd(a, floor: float = 1e-12) -> np.ndarray:
    """Symmetric inverse square root; raises if an eigenvalue is below ``floor``."""
    w, v = sym_eig(a)
    if w[0] < floor:
        raise DecompositionError(
            f"near-singular matrix: smallest eigenvalue {w[0]:.3e} < {floor:g}", pivot=0
        )
    return (v / np.sqrt(w)) @ v.T


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) x = b`` given the lower Cholesky factor."""
    y = _solve_tri(L, b, lower=True)
    return _solve_tri(L, y, lower=True, trans="T")
