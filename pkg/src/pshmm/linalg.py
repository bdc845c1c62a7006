"""Dense symmetric linear-algebra kernels for penalty algebra.

Everything here works on plain numpy arrays; symmetry is enforced on entry
where it matters.  The rank tolerance for pseudo-inversion and
log-pseudo-determinants is relative to the largest eigenvalue.
"""

import numpy as np
from scipy import linalg as sla

DEFAULT_RANK_TOL = 1e-8


class DegeneratePenaltyError(ValueError):
    """All eigenvalues of a penalty matrix fell below the rank tolerance."""


def _check_sym(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    scale = np.abs(A).max()
    if scale > 0 and np.abs(A - A.T).max() > 1e-12 * max(scale, 1.0):
        raise ValueError("matrix is not symmetric")
    return 0.5 * (A + A.T)


def sym_eig(A: np.ndarray):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""
    A = _check_sym(A)
    w, V = np.linalg.eigh(A)
    return w[::-1], V[:, ::-1]


def pseudo_inverse(A: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric PSD matrix.

    Eigenvalues at or below ``rank_tol * max(eigenvalue)`` are treated as
    structural zeros.  Small negative eigenvalues within the same tolerance
    are clamped to zero.
    """
    w, V = sym_eig(A)
    cut = rank_tol * max(w[0], 0.0)
    inv = np.where(w > cut, 1.0 / np.where(w > cut, w, 1.0), 0.0)
    out = (V * inv) @ V.T
    return 0.5 * (out + out.T)


def log_pdet(A: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> float:
    """Log pseudo-determinant: sum of logs of eigenvalues above tolerance."""
    w, _ = sym_eig(A)
    cut = rank_tol * max(w[0], 0.0)
    kept = w[w > cut]
    if kept.size == 0:
        raise DegeneratePenaltyError("all eigenvalues below rank tolerance")
    return float(np.log(kept).sum())


def rank(A: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    """Numerical rank relative to the largest eigenvalue."""
    w, _ = sym_eig(A)
    cut = rank_tol * max(w[0], 0.0)
    return int((w > cut).sum())


def nearest_pd(A: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Clamp eigenvalues so the minimum is at least ``eps * max(eigenvalue)``.

    Returns ``A`` unchanged (up to symmetrization) when it already satisfies
    the bound.
    """
    w, V = sym_eig(A)
    floor = eps * max(w[0], eps)
    if w[-1] >= floor:
        return _check_sym(A)
    out = (V * np.maximum(w, floor)) @ V.T
    return 0.5 * (out + out.T)


def kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker product with finiteness checks."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("non-finite entries")
    return np.kron(A, B)


def trace_product(A: np.ndarray, B: np.ndarray) -> float:
    """tr(AB) for symmetric A, B without forming the product."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError("dimension mismatch")
    return float(np.sum(A * B))


def solve_spd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve AX = B for symmetric positive definite A via Cholesky.

    Raises ``np.linalg.LinAlgError`` on factorization failure; callers are
    expected to apply :func:`nearest_pd` and retry.
    """
    A = _check_sym(A)
    try:
        cf = sla.cho_factor(A, lower=True)
    except sla.LinAlgError as err:
        raise np.linalg.LinAlgError(str(err)) from err
    return sla.cho_solve(cf, np.asarray(B, dtype=float))
