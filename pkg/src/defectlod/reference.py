"""Per-sample reference solvers (full PG-LOD, fine FEM) and error norms."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .corrector import patch_solver
from .interpolation import build_interpolation, prolongation
from .linalg import local_mass, local_stiffness, sparse_solve
from .mesh import NestedMesh, patch, patch_layout
from .offline import fine_load, forcing, load_vector
from .online import CoarseSystem, patch_maps, scatter_global, solve_coarse


class UndefinedError(ArithmeticError):
    """A relative error was requested against a reference of zero norm."""


@dataclass(eq=False)
class ReferenceSolution:
    coarse: np.ndarray = field(repr=False)
    upscaled: np.ndarray | None = field(default=None, repr=False)
    fine_fem: np.ndarray | None = field(default=None, repr=False)
    local_matrices: np.ndarray | None = field(default=None, repr=False)
    stiffness: sparse.csr_matrix | None = field(default=None, repr=False)


def _resolve_f(f, d):
    if f is None or f == "auto":
        f = "sin1d" if d == 1 else "sin2d"
    return forcing(f) if isinstance(f, str) else f


def pglod_local(a_full, mesh: NestedMesh, m: int, interpolation: str = "averagedL2", keep_correctors=True):
    """Correctors and b_T of every element for the actual coefficient ``a_full``."""
    a_full = np.asarray(a_full, dtype=float)
    layout = patch_layout(mesh, m)
    solver = patch_solver(layout, build_interpolation(mesh, interpolation))
    # interior eliminations of all coarse elements, shared by the patches
    blocks = solver.condenser.condense(a_full[mesh.coarse_element_fine_elements], solver.h_scale)
    q = 2**mesh.d
    local = np.empty((mesh.n_coarse, q, layout.n_coarse_nodes))
    values = np.empty((mesh.n_coarse, layout.n_fine_nodes, q)) if keep_correctors else None
    for T in range(mesh.n_coarse):
        geom = patch(mesh, T, m)
        corr, b = solver.solve(blocks, geom.coarse_elements)
        local[T] = b.entries
        if keep_correctors:
            values[T] = corr.values
    return local, values


def pglod_solve(a_full, mesh: NestedMesh, m: int, f="auto", interpolation: str = "averagedL2", upscale=True):
    local, values = pglod_local(a_full, mesh, m, interpolation, keep_correctors=upscale)
    K = scatter_global(local, mesh, m)
    system = CoarseSystem(stiffness=K, load=load_vector(mesh, _resolve_f(f, mesh.d)))
    u_H = solve_coarse(system, mesh)
    out = ReferenceSolution(coarse=u_H, local_matrices=local, stiffness=K)
    if upscale:
        maps = patch_maps(mesh, m)
        uT = u_H[maps.element_nodes]  # (elements, 2**d)
        corr = np.einsum("tnq,tq->tn", values, uT)
        fine = prolongation(mesh) @ u_H
        fine -= np.bincount(maps.fine_nodes.ravel(), corr.ravel(), minlength=mesh.n_fine)
        out.upscaled = fine
    return out


def fine_stiffness(a_full, mesh: NestedMesh) -> sparse.csr_matrix:
    kloc = local_stiffness(mesh.d, mesh.h)
    en = mesh.fine_element_nodes
    q = en.shape[1]
    rows = np.repeat(en, q, axis=1).ravel()
    cols = np.tile(en, (1, q)).ravel()
    vals = (np.asarray(a_full, dtype=float)[:, None, None] * kloc[None]).ravel()
    return sparse.coo_matrix((vals, (rows, cols)), shape=(mesh.n_fine, mesh.n_fine)).tocsr()


def fine_mass(mesh: NestedMesh) -> sparse.csr_matrix:
    mloc = local_mass(mesh.d, mesh.h)
    en = mesh.fine_element_nodes
    q = en.shape[1]
    rows = np.repeat(en, q, axis=1).ravel()
    cols = np.tile(en, (1, q)).ravel()
    vals = np.broadcast_to(mloc, (len(en), q, q)).ravel()
    return sparse.coo_matrix((vals, (rows, cols)), shape=(mesh.n_fine, mesh.n_fine)).tocsr()


def coarse_mass(mesh: NestedMesh) -> sparse.csr_matrix:
    mloc = local_mass(mesh.d, mesh.H)
    en = mesh.coarse_element_nodes
    q = en.shape[1]
    rows = np.repeat(en, q, axis=1).ravel()
    cols = np.tile(en, (1, q)).ravel()
    vals = np.broadcast_to(mloc, (len(en), q, q)).ravel()
    return sparse.coo_matrix((vals, (rows, cols)), shape=(mesh.n_coarse, mesh.n_coarse)).tocsr()


def fem_fine_solve(a_full, mesh: NestedMesh, f="auto") -> np.ndarray:
    """Q1 FEM on the fine torus grid, zero mean enforced by a Lagrange multiplier."""
    K = fine_stiffness(a_full, mesh)
    c = np.full(mesh.n_fine, mesh.h**mesh.d)
    M = sparse.bmat([[K, sparse.csr_matrix(c[:, None])], [sparse.csr_matrix(c[None, :]), None]])
    rhs = np.concatenate([fine_load(mesh, _resolve_f(f, mesh.d)), [0.0]])
    return sparse_solve(M.tocsc(), rhs, kind="symmetric-indefinite")[: mesh.n_fine]


def l2_norm(values, mesh: NestedMesh, level: str = "coarse") -> float:
    M = coarse_mass(mesh) if level == "coarse" else fine_mass(mesh)
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(max(v @ (M @ v), 0.0)))


def h1_seminorm(values, mesh: NestedMesh) -> float:
    K = fine_stiffness(np.ones(mesh.n_fine), mesh)
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(max(v @ (K @ v), 0.0)))


def _relative(num, den):
    if den == 0.0:
        raise UndefinedError("reference norm is zero; relative error undefined")
    return num / den


def relative_errors(reference: ReferenceSolution, coarse, upscaled, mesh: NestedMesh):
    """(|u_H - u~_H|_L2 / |u_H|_L2, |u_ms - u~_ms|_H1 / |u_ms|_H1).

    The H1 entry is None when no upscaled fields are given.
    """
    e_l2 = _relative(l2_norm(reference.coarse - coarse, mesh), l2_norm(reference.coarse, mesh))
    if upscaled is None or reference.upscaled is None:
        return e_l2, None
    e_h1 = _relative(
        h1_seminorm(reference.upscaled - upscaled, mesh), h1_seminorm(reference.upscaled, mesh)
    )
    return e_l2, e_h1
