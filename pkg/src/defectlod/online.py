"""Online phase: combine stored local matrices per element, assemble, solve, upscale."""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .coefficient import DataError, DefectSample
from .interpolation import prolongation
from .linalg import sparse_solve
from .mesh import ConfigurationError, NestedMesh, patch
from .offline import OfflineDatabase


@dataclass(eq=False)
class CoarseSystem:
    stiffness: sparse.csr_matrix = field(repr=False)  # K[k, j] = sum_T b_T(lambda_j, lambda_k)
    load: np.ndarray = field(repr=False)
    solution: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class UpscaledSolution:
    fine_values: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class PatchMaps:
    """Global indices of every element patch, stacked over T = 0..nH**d - 1."""

    coarse_nodes: np.ndarray  # (elements, patch coarse nodes)
    fine_nodes: np.ndarray  # (elements, patch fine nodes)
    cells: np.ndarray  # (elements, patch cells)
    element_nodes: np.ndarray  # (elements, 2**d)


@functools.lru_cache(maxsize=8)
def patch_maps(mesh: NestedMesh, m: int) -> PatchMaps:
    geoms = [patch(mesh, T, m) for T in range(mesh.n_coarse)]
    return PatchMaps(
        coarse_nodes=np.stack([g.coarse_nodes for g in geoms]),
        fine_nodes=np.stack([g.fine_nodes for g in geoms]),
        cells=np.stack([g.cells for g in geoms]),
        element_nodes=mesh.coarse_element_nodes,
    )


def combine_local(db: OfflineDatabase, mu) -> np.ndarray:
    """b~_T = sum_i mu_i b_T^i, touching only the nonzero weights in ascending i."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (len(db.local_matrices),):
        raise DataError(f"mu has length {mu.size}, database has {len(db.local_matrices)} coefficients")
    return _combine(db.local_matrices, np.flatnonzero(mu), mu)


def _combine(stack, idx, mu):
    out = np.zeros(stack.shape[1:])
    for i in idx:
        if mu[i] == 1.0:
            out += stack[i]
        else:
            out += mu[i] * stack[i]
    return out


def _terms(bits_local):
    """Nonzero (indices, weights) of mu for a patch with defect bits ``bits_local``."""
    defects = np.flatnonzero(bits_local) + 1
    mu0 = 1.0 - len(defects)
    if mu0 != 0.0:
        return np.concatenate([[0], defects]), np.concatenate([[mu0], np.ones(len(defects))])
    return defects, np.ones(len(defects))


def check_geometry(db: OfflineDatabase, mesh: NestedMesh, sample: DefectSample | None = None):
    if db.mesh != mesh:
        raise ConfigurationError(f"database mesh {db.mesh} does not match {mesh}")
    if sample is not None and len(sample.bits) != mesh.n_cells:
        raise ConfigurationError(f"sample has {len(sample.bits)} cells, mesh has {mesh.n_cells}")


def combined_local_matrices(db: OfflineDatabase, sample: DefectSample) -> np.ndarray:
    """b~_T for every coarse element, shape (elements, 2**d, patch coarse nodes)."""
    maps = patch_maps(db.mesh, db.m)
    bits = sample.bits[maps.cells]
    stack = db.local_matrices
    out = np.empty((db.mesh.n_coarse,) + stack.shape[1:])
    for T in range(db.mesh.n_coarse):
        idx, w = _terms(bits[T])
        # weights are 1 except mu_0; a single weighted sum in ascending i
        out[T] = np.tensordot(w, stack[idx], axes=1) if len(idx) > 1 else w[0] * stack[idx[0]]
    return out


def scatter_global(local: np.ndarray, mesh: NestedMesh, m: int) -> sparse.csr_matrix:
    """Sum local (elements, 2**d, patch nodes) contributions into K[k, j]."""
    maps = patch_maps(mesh, m)
    rows = np.broadcast_to(maps.coarse_nodes[:, None, :], local.shape)
    cols = np.broadcast_to(maps.element_nodes[:, :, None], local.shape)
    K = sparse.coo_matrix(
        (local.ravel(), (rows.ravel(), cols.ravel())), shape=(mesh.n_coarse, mesh.n_coarse)
    ).tocsr()
    K.sum_duplicates()
    K.sort_indices()
    return K


def assemble_global(db: OfflineDatabase, sample: DefectSample, mesh: NestedMesh | None = None):
    mesh = db.mesh if mesh is None else mesh
    check_geometry(db, mesh, sample)
    K = scatter_global(combined_local_matrices(db, sample), mesh, db.m)
    return CoarseSystem(stiffness=K, load=db.load.copy())


def solve_coarse(system: CoarseSystem, mesh: NestedMesh) -> np.ndarray:
    """Solve K u = F with a Lagrange multiplier enforcing zero mean of u."""
    K = system.stiffness
    n = K.shape[0]
    c = np.full(n, mesh.H**mesh.d)  # integrals of the coarse hats
    M = sparse.bmat([[K, sparse.csr_matrix(c[:, None])], [sparse.csr_matrix(c[None, :]), None]])
    rhs = np.concatenate([system.load, [0.0]])
    x = sparse_solve(M.tocsc(), rhs, kind="general")
    system.solution = x[:n]
    return system.solution


def upscale(db: OfflineDatabase, sample: DefectSample, u_H, mesh: NestedMesh | None = None, chunk: int = 128):
    """prolong(u_H) minus the combined correctors applied to u_H on every element."""
    mesh = db.mesh if mesh is None else mesh
    check_geometry(db, mesh, sample)
    values = db.require_correctors()
    maps = patch_maps(mesh, db.m)
    bits = sample.bits[maps.cells]
    u_H = np.asarray(u_H, dtype=float)
    n_off, nfn, q = values.shape
    flat = values.reshape(n_off, nfn * q)
    corr = np.empty((mesh.n_coarse, nfn))
    # sum_i mu_i C_i(u_T) as one dense product per chunk of elements
    for start in range(0, mesh.n_coarse, chunk):
        Ts = range(start, min(start + chunk, mesh.n_coarse))
        W = np.zeros((len(Ts), n_off))
        for row, T in enumerate(Ts):
            idx, w = _terms(bits[T])
            W[row, idx] = w
        combined = (W @ flat).reshape(len(Ts), nfn, q)
        corr[Ts.start : Ts.stop] = np.einsum("tnq,tq->tn", combined, u_H[maps.element_nodes[Ts.start : Ts.stop]])
    fine = prolongation(mesh) @ u_H
    fine -= np.bincount(maps.fine_nodes.ravel(), corr.ravel(), minlength=mesh.n_fine)
    return UpscaledSolution(fine_values=fine)
