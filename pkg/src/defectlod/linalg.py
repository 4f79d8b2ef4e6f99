"""Shared numeric kernels.

Element tables for Q1 elements on uniform tensor grids, sparse direct
solves and the small generalized eigenproblem used by the error indicator.
Local node ordering on a d-dimensional element is lexicographic with the
first axis running fastest, e.g. (0,0), (1,0), (0,1), (1,1) in 2D.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as sparse_linalg

# Compressed-row storage is the global matrix format throughout.
SparseMatrix = sparse.csr_matrix


class SolverError(RuntimeError):
    """A direct solve broke down or returned an inaccurate solution."""


def _kron_axes(factors):
    # factors[0] acts on axis 0, which runs fastest in the local ordering
    out = np.ones((1, 1))
    for f in factors:
        out = np.kron(f, out)
    return out


def mass_1d(h: float) -> np.ndarray:
    return h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])


def stiffness_1d(h: float) -> np.ndarray:
    return 1.0 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])


def local_mass(d: int, h: float) -> np.ndarray:
    """Exact mass matrix of a Q1 element with side ``h``."""
    return _kron_axes([mass_1d(h)] * d)


def local_stiffness(d: int, h: float) -> np.ndarray:
    """Exact unit-coefficient stiffness matrix of a Q1 element with side ``h``."""
    out = np.zeros((2**d, 2**d))
    for axis in range(d):
        factors = [mass_1d(h)] * d
        factors[axis] = stiffness_1d(h)
        out += _kron_axes(factors)
    return out


def local_nodes(d: int) -> np.ndarray:
    """Corner offsets of the reference element, shape (2**d, d)."""
    return np.array([[(k >> a) & 1 for a in range(d)] for k in range(2**d)])


def coarse_basis_on_fine(d: int, r: int) -> np.ndarray:
    """Values of the 2**d coarse basis functions at the (r+1)**d fine nodes.

    Shape ((r+1)**d, 2**d); rows in lexicographic fine node order.
    """
    t = np.arange(r + 1) / r
    lam1 = np.stack([1.0 - t, t], axis=1)
    out = np.ones((1, 1))
    for _ in range(d):
        out = np.kron(lam1, out)
    return out


def sparse_solve(M, rhs, kind: str = "spd", rtol: float = 1e-12):
    """Direct sparse solve with a relative residual check.

    ``kind`` is "spd" or "symmetric-indefinite"; both go through SuperLU
    with a fixed column ordering so repeated runs pivot identically.
    """
    if kind not in ("spd", "symmetric-indefinite", "general"):
        raise ValueError(f"unknown solve kind {kind!r}")
    M = sparse.csc_matrix(M)
    rhs = np.asarray(rhs, dtype=float)
    if kind == "spd":
        options = dict(SymmetricMode=True)
        lu = _splu(M, "MMD_AT_PLUS_A", options, diag_pivot_thresh=0.0)
    else:
        lu = _splu(M, "MMD_AT_PLUS_A", {}, diag_pivot_thresh=1.0)
    check_pivots(lu)
    x = lu.solve(rhs)
    check_residual(M, x, rhs, rtol)
    return x


PIVOT_RATIO_MIN = 1e-14


def check_pivots(lu, what: str = "matrix"):
    """Reject factorizations whose pivots span more than 1/PIVOT_RATIO_MIN."""
    udiag = np.abs(lu.U.diagonal())
    ratio = udiag.min() / udiag.max() if udiag.max() > 0 else 0.0
    if ratio < PIVOT_RATIO_MIN:
        raise SolverError(
            f"{what} is numerically singular: smallest/largest pivot {ratio:.2e} "
            f"(threshold {PIVOT_RATIO_MIN:.0e})"
        )
    return ratio


def _splu(M, permc_spec, options, diag_pivot_thresh):
    try:
        return sparse_linalg.splu(
            M, permc_spec=permc_spec, diag_pivot_thresh=diag_pivot_thresh, options=options
        )
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed ({exc}); n={M.shape[0]}") from exc


def check_residual(M, x, rhs, rtol):
    res = M @ x - rhs
    scale = abs(M).max() * np.abs(x).max(axis=0) + np.abs(rhs).max(axis=0)
    rel = np.max(np.abs(res).max(axis=0) / np.where(scale > 0, scale, 1.0))
    if not np.isfinite(rel) or rel > rtol:
        raise SolverError(f"relative residual {rel:.3e} exceeds {rtol:.1e}")
    return rel


def constant_complement(n: int) -> np.ndarray:
    """Orthonormal basis (n, n-1) of the complement of the constant vector."""
    return scipy.linalg.null_space(np.ones((1, n)))


def gen_eig_max(S, B):
    """Largest eigenpair of ``S v = nu B v`` for symmetric S and SPD B."""
    S = 0.5 * (np.asarray(S, float) + np.asarray(S, float).T)
    B = 0.5 * (np.asarray(B, float) + np.asarray(B, float).T)
    try:
        scipy.linalg.cholesky(B)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("B is not positive definite") from exc
    if not np.any(S):
        return 0.0, np.eye(len(S))[:, 0]
    w, v = scipy.linalg.eigh(S, B)
    # S is semidefinite; negative values are roundoff
    return max(float(w[-1]), 0.0), v[:, -1]
