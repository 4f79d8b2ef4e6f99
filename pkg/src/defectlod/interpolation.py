"""Quasi-interpolation I_H = E_H o Pi_H from the fine to the coarse space."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .linalg import coarse_basis_on_fine, local_mass
from .mesh import ConfigurationError, NestedMesh, grid_coords, ravel, unravel

KINDS = ("averagedL2", "nodal1d")


@dataclass(frozen=True, eq=False)
class InterpolationMap:
    kind: str
    matrix: sparse.csr_matrix = field(repr=False)  # coarse nodes x fine nodes
    element_matrix: np.ndarray = field(repr=False)  # 2**d x (r+1)**d corner values

    def __call__(self, fine_values):
        return self.matrix @ fine_values


def element_projection(d: int, r: int, kind: str = "averagedL2") -> np.ndarray:
    """Corner values of the local projection onto Q1 of one coarse element.

    Maps the (r+1)**d fine nodal values on a coarse element to the 2**d
    corner values of its local L2 projection (or of point evaluation).
    """
    lam = coarse_basis_on_fine(d, r)
    if kind == "nodal1d":
        corners = grid_coords((2,) * d) * r
        idx = np.sum(corners * (r + 1) ** np.arange(d), axis=1)
        out = np.zeros((2**d, (r + 1) ** d))
        out[np.arange(2**d), idx] = 1.0
        return out
    fine_mass = np.zeros(((r + 1) ** d,) * 2)
    elem_nodes = grid_coords((r,) * d)[:, None, :] + grid_coords((2,) * d)[None]
    idx = np.sum(elem_nodes * (r + 1) ** np.arange(d), axis=-1)
    mloc = local_mass(d, 1.0 / r)
    for e in idx:
        fine_mass[np.ix_(e, e)] += mloc
    return np.linalg.solve(local_mass(d, 1.0), lam.T @ fine_mass)


def build_interpolation(mesh: NestedMesh, kind: str = "averagedL2") -> InterpolationMap:
    if kind not in KINDS:
        raise ConfigurationError(f"unknown interpolation kind {kind!r}")
    if kind == "nodal1d" and mesh.d != 1:
        raise ConfigurationError("nodal interpolation is only supported for d=1")
    d, r = mesh.d, mesh.refinement
    P = element_projection(d, r, kind)
    # fine nodes of every coarse element
    inner = grid_coords((r + 1,) * d)
    coords = unravel(np.arange(mesh.n_coarse), mesh.nH, d) * r
    fine = ravel(coords[:, None, :] + inner[None], mesh.nh)
    coarse = mesh.coarse_element_nodes
    rows = np.repeat(coarse[:, :, None], fine.shape[1], axis=2)
    cols = np.repeat(fine[:, None, :], 2**d, axis=1)
    vals = np.broadcast_to(P / 2**d, rows.shape)
    M = sparse.coo_matrix(
        (vals.ravel(), (rows.ravel(), cols.ravel())), shape=(mesh.n_coarse, mesh.n_fine)
    ).tocsr()
    M.sum_duplicates()
    return InterpolationMap(kind=kind, matrix=M, element_matrix=P)


def prolongation(mesh: NestedMesh) -> sparse.csr_matrix:
    """Fine nodal values of every coarse basis function, shape (n_fine, n_coarse)."""
    r = mesh.refinement
    fine = np.arange(mesh.nh)
    left = fine // r
    t = (fine % r) / r
    rows = np.concatenate([fine, fine])
    cols = np.concatenate([left, (left + 1) % mesh.nH])
    vals = np.concatenate([1.0 - t, t])
    p1 = sparse.coo_matrix((vals, (rows, cols)), shape=(mesh.nh, mesh.nH)).tocsr()
    p1.eliminate_zeros()
    out = p1
    for _ in range(mesh.d - 1):
        out = sparse.kron(p1, out)
    return sparse.csr_matrix(out)
