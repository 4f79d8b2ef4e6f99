"""Element correctors on patches and local PG-LOD stiffness contributions.

The corrector problem on a patch is a saddle-point system: patch stiffness
on the free fine nodes plus one constraint row per coarse node asking the
quasi-interpolation of the corrector to vanish.  Fine nodes strictly inside
a coarse element couple only to that element, so they are eliminated per
coarse element first (static condensation).  The condensed KKT system on
the coarse-element skeleton and the multipliers is then factorized with a
sparse direct solver.  Eliminations depend only on the coefficient inside
one coarse element, so they are shared by all patches containing it.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as sparse_linalg

from .interpolation import InterpolationMap
from .linalg import SolverError, check_pivots, check_residual, coarse_basis_on_fine, local_stiffness
from .mesh import PatchLayout, grid_coords


@dataclass(frozen=True, eq=False)
class CorrectorBasis:
    """Correctors C_{m,T} lambda_j of the 2**d corner basis functions of T."""

    layout: PatchLayout = field(repr=False)
    values: np.ndarray = field(repr=False)  # (patch fine nodes, 2**d)

    def gradients(self) -> np.ndarray:
        """Gradients at the fine element centers, shape (fine elements, d, 2**d).

        Q1 gradients are not elementwise constant in 2D; the full field is
        represented exactly by ``values``.
        """
        d, h = self.layout.mesh.d, self.layout.mesh.h
        corners = grid_coords((2,) * d)
        loc = self.values[self.layout.fine_element_nodes]  # (ne, 2**d, q)
        out = []
        for a in range(d):
            sign = np.where(corners[:, a] == 1, 1.0, -1.0) / (h * 2 ** (d - 1))
            out.append(np.einsum("c,ecq->eq", sign, loc))
        return np.stack(out, axis=1)


@dataclass(frozen=True, eq=False)
class LocalStiffness:
    """b_T(lambda_j, lambda_k): rows j over corners of T, columns k over patch coarse nodes."""

    entries: np.ndarray


@dataclass(frozen=True, eq=False)
class ElementBlocks:
    """Condensed data of a batch of coarse elements for one coefficient."""

    AL: np.ndarray  # A_K times coarse basis, (nK, nloc, q)
    Z: np.ndarray  # K_II^-1 K_IB, (nK, nI, nB)
    Y: np.ndarray  # K_II^-1 P_I^T, (nK, nI, q)
    hI: np.ndarray  # K_II^-1 (A_K lambda)_I, (nK, nI, q)
    E: np.ndarray  # [[S, G^T], [G, -W]], (nK, nb, nb)
    rhs: np.ndarray  # condensed right-hand side if the element is the center, (nK, nb, q)

    def take(self, ids) -> "ElementBlocks":
        return ElementBlocks(*(getattr(self, f)[ids] for f in ("AL", "Z", "Y", "hI", "E", "rhs")))

    def replace(self, ids, other: "ElementBlocks") -> "ElementBlocks":
        out = {}
        for f in ("AL", "Z", "Y", "hI", "E", "rhs"):
            arr = getattr(self, f).copy()
            arr[ids] = getattr(other, f)
            out[f] = arr
        return ElementBlocks(**out)


class ElementCondenser:
    """Dense interior elimination for coarse elements of one mesh."""

    def __init__(self, d: int, r: int, interp_element: np.ndarray):
        self.d, self.r = d, r
        self.q = 2**d
        self.nloc = (r + 1) ** d
        coords = grid_coords((r + 1,) * d)
        interior = np.all((coords > 0) & (coords < r), axis=1)
        self.loc_I = np.flatnonzero(interior)
        self.loc_B = np.flatnonzero(~interior)
        self.P = np.asarray(interp_element)
        self.lam = coarse_basis_on_fine(d, r)
        elem = grid_coords((r,) * d)[:, None, :] + grid_coords((2,) * d)[None]
        self.fine_elem_nodes = np.sum(elem * (r + 1) ** np.arange(d), axis=-1)
        self.kloc = local_stiffness(d, 1.0 / r)
        # with unit coarse element size the 2D element matrix is scale free,
        # the 1D one carries 1/h; fold the true h in at assembly
        self._flat = [
            (self.fine_elem_nodes[:, i] * self.nloc + self.fine_elem_nodes[:, j], self.kloc[i, j])
            for i in range(self.q)
            for j in range(self.q)
        ]

    def element_matrices(self, a: np.ndarray, h_scale: float) -> np.ndarray:
        """Dense stiffness (nK, nloc, nloc) of coarse elements with fine values ``a``."""
        nK = a.shape[0]
        out = np.zeros((nK, self.nloc * self.nloc))
        for pos, k in self._flat:
            out[:, pos] += a * (k * h_scale)
        return out.reshape(nK, self.nloc, self.nloc)

    def condense(self, a: np.ndarray, h_scale: float = 1.0, chunk: int = 64) -> ElementBlocks:
        """Eliminate interior nodes of elements with fine coefficients ``a`` (nK, r**d)."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        parts = [self._condense(a[s : s + chunk], h_scale) for s in range(0, len(a), chunk)]
        if len(parts) == 1:
            return parts[0]
        return ElementBlocks(
            *(np.concatenate([getattr(p, f) for p in parts]) for f in ("AL", "Z", "Y", "hI", "E", "rhs"))
        )

    def _condense(self, a, h_scale) -> ElementBlocks:
        I, B, q = self.loc_I, self.loc_B, self.q
        K = self.element_matrices(a, h_scale)
        AL = K @ self.lam
        nK, nI, nB = len(a), len(I), len(B)
        KBB = K[:, B][:, :, B]
        PB = np.broadcast_to(self.P[:, B], (nK, q, nB))
        if nI:
            KII = K[:, I][:, :, I]
            KIB = K[:, I][:, :, B]
            PI = np.broadcast_to(self.P[:, I].T, (nK, nI, q))
            sol = np.linalg.solve(KII, np.concatenate([KIB, PI, AL[:, I]], axis=2))
            Z, Y, hI = sol[:, :, :nB], sol[:, :, nB : nB + q], sol[:, :, nB + q :]
            S = KBB - np.swapaxes(KIB, 1, 2) @ Z
            G = PB - np.swapaxes(Y, 1, 2) @ KIB
            W = np.swapaxes(PI, 1, 2) @ Y
            rB = AL[:, B] - np.swapaxes(Z, 1, 2) @ AL[:, I]
            rN = -np.swapaxes(Y, 1, 2) @ AL[:, I]
        else:
            Z = np.zeros((nK, 0, nB))
            Y = np.zeros((nK, 0, q))
            hI = np.zeros((nK, 0, q))
            S, G, W = KBB, np.array(PB), np.zeros((nK, q, q))
            rB, rN = AL[:, B], np.zeros((nK, q, q))
        S = 0.5 * (S + np.swapaxes(S, 1, 2))
        W = 0.5 * (W + np.swapaxes(W, 1, 2))
        E = np.zeros((nK, nB + q, nB + q))
        E[:, :nB, :nB] = S
        E[:, nB:, :nB] = G
        E[:, :nB, nB:] = np.swapaxes(G, 1, 2)
        E[:, nB:, nB:] = -W
        rhs = np.concatenate([rB, rN], axis=1)
        return ElementBlocks(AL=AL, Z=Z, Y=Y, hI=hI, E=E, rhs=rhs)


def h_scale(layout_or_mesh) -> float:
    mesh = getattr(layout_or_mesh, "mesh", layout_or_mesh)
    # local_stiffness(d, 1/r) is for a unit coarse element; rescale to H
    return mesh.nH if mesh.d == 1 else 1.0


class PatchSolver:
    """Condensed KKT structure of one patch layout (shared by all centers)."""

    def __init__(self, layout: PatchLayout, interpolation: InterpolationMap):
        mesh = layout.mesh
        self.layout = layout
        self.condenser = ElementCondenser(mesh.d, mesh.refinement, interpolation.element_matrix)
        self.h_scale = h_scale(mesh)
        cond = self.condenser
        q = cond.q
        self.elem_nodes = layout.coarse_element_fine_nodes
        fixed = layout.boundary_mask
        nfn = layout.n_fine_nodes

        # constraint rows on free fine nodes; rows vanishing there are dropped
        C = self.constraint_matrix()
        free = np.flatnonzero(~fixed)
        row_norm = np.sqrt(np.asarray(C[:, free].multiply(C[:, free]).sum(axis=1))).ravel()
        active = row_norm > 1e-12 * max(row_norm.max(), 1.0)

        skel = np.unique(self.elem_nodes[:, cond.loc_B])
        skel = skel[~fixed[skel]]
        skel_index = np.full(nfn, -1)
        skel_index[skel] = np.arange(len(skel))
        mult_index = np.full(layout.n_coarse_nodes, -1)
        mult_index[active] = len(skel) + np.arange(active.sum())
        self.n_skel = len(skel)
        self.n = len(skel) + int(active.sum())
        self.active = active
        self.g = np.concatenate(
            [skel_index[self.elem_nodes[:, cond.loc_B]], mult_index[layout.coarse_element_nodes]],
            axis=1,
        )
        nb = self.g.shape[1]
        rows = np.broadcast_to(self.g[:, :, None], (len(self.g), nb, nb)).ravel()
        cols = np.broadcast_to(self.g[:, None, :], (len(self.g), nb, nb)).ravel()
        self.valid = (rows >= 0) & (cols >= 0)
        keys = rows[self.valid].astype(np.int64) * self.n + cols[self.valid]
        ukeys, self.inverse = np.unique(keys, return_inverse=True)
        self.indices = (ukeys % self.n).astype(np.int32)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(ukeys // self.n, minlength=self.n))])
        self.nnz = len(ukeys)
        self.q = q

    def constraint_matrix(self) -> sparse.csr_matrix:
        """Rows (I_H q)(z) up to the factor 2**-d, for q supported in the patch."""
        layout, P = self.layout, self.condenser.P
        nK, nloc = self.elem_nodes.shape
        rows = np.repeat(layout.coarse_element_nodes[:, :, None], nloc, axis=2)
        cols = np.repeat(self.elem_nodes[:, None, :], P.shape[0], axis=1)
        vals = np.broadcast_to(P, rows.shape)
        return sparse.coo_matrix(
            (vals.ravel(), (rows.ravel(), cols.ravel())),
            shape=(layout.n_coarse_nodes, layout.n_fine_nodes),
        ).tocsr()

    def condense_patch(self, a_patch: np.ndarray) -> ElementBlocks:
        """Element blocks of a patch coefficient given on local fine elements."""
        a_elem = np.asarray(a_patch)[self.layout.coarse_element_fine_elements]
        return self.condenser.condense(a_elem, self.h_scale)

    def system(self, blocks: ElementBlocks, ids=None) -> sparse.csc_matrix:
        E = blocks.E if ids is None else blocks.E[ids]
        data = np.bincount(self.inverse, weights=E.reshape(-1)[self.valid], minlength=self.nnz)
        # the assembled matrix is exactly symmetric, so CSR arrays are also CSC arrays
        return sparse.csc_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def solve(self, blocks: ElementBlocks, ids=None, center=None):
        """Correctors of the center element and its local stiffness matrix.

        ``blocks`` holds condensed elements; ``ids`` selects the patch
        elements from it in local order (default: blocks are already local).
        """
        layout, cond, q = self.layout, self.condenser, self.q
        if ids is None:
            ids = np.arange(layout.n_coarse_elements)
        ids = np.asarray(ids)
        c = layout.center_local if center is None else center
        M = self.system(blocks, ids)
        rhs = np.zeros((self.n + 1, q))
        gc = self.g[c]
        np.add.at(rhs, np.where(gc >= 0, gc, self.n), blocks.rhs[ids[c]])
        rhs = rhs[: self.n]
        if self.n == 0:
            # every unknown is an element interior (m = 0 without constraints)
            x = rhs
        else:
            try:
                lu = sparse_linalg.splu(
                    M, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1, options=dict(SymmetricMode=True)
                )
            except RuntimeError as exc:
                raise SolverError(f"corrector KKT system is singular ({exc})") from exc
            check_pivots(lu, "corrector KKT system")
            x = lu.solve(rhs)
            check_residual(M, x, rhs, 1e-10)
        xe = np.vstack([x, np.zeros((1, q))])
        g = np.where(self.g >= 0, self.g, self.n)
        nB = len(cond.loc_B)
        xB = xe[g[:, :nB]]  # (nK, nB, q)
        nu = xe[g[:, nB:]]  # (nK, q, q)
        Z, Y = blocks.Z[ids], blocks.Y[ids]
        xI = -(Z @ xB) - (Y @ nu)
        xI[c] += blocks.hI[ids[c]]
        values = np.zeros((layout.n_fine_nodes, q))
        values[self.elem_nodes[:, cond.loc_B]] = xB
        values[self.elem_nodes[:, cond.loc_I]] = xI
        corrector = CorrectorBasis(layout=layout, values=values)
        return corrector, self.local_stiffness(blocks.AL[ids], values, c)

    def local_stiffness(self, AL, values, center) -> LocalStiffness:
        layout, lam = self.layout, self.condenser.lam
        qloc = values[self.elem_nodes]  # (nK, nloc, q)
        contrib = -np.einsum("knc,knj->kcj", AL, qloc)
        contrib[center] += AL[center].T @ lam
        cols = np.broadcast_to(layout.coarse_element_nodes[:, :, None], contrib.shape)
        rows = np.broadcast_to(np.arange(self.q)[None, None, :], contrib.shape)
        b = np.zeros((self.q, layout.n_coarse_nodes))
        np.add.at(b, (rows.ravel(), cols.ravel()), contrib.ravel())
        return LocalStiffness(entries=b)


@functools.lru_cache(maxsize=8)
def patch_solver(layout: PatchLayout, interpolation: InterpolationMap) -> PatchSolver:
    return PatchSolver(layout, interpolation)


def solve_corrector(a_patch, layout: PatchLayout, interpolation: InterpolationMap):
    """Correctors of the reference center element for a patch coefficient."""
    a_patch = np.asarray(a_patch, dtype=float)
    if np.any(a_patch <= 0):
        raise SolverError("corrector coefficient must be positive on every fine element")
    solver = patch_solver(layout, interpolation)
    corrector, _ = solver.solve(solver.condense_patch(a_patch))
    return corrector


def patch_stiffness(a_patch, layout: PatchLayout) -> sparse.csr_matrix:
    """Fine stiffness matrix on all patch fine nodes, coefficient ``a_patch``."""
    mesh = layout.mesh
    kloc = local_stiffness(mesh.d, mesh.h)
    en = layout.fine_element_nodes
    q = en.shape[1]
    rows = np.repeat(en, q, axis=1).ravel()
    cols = np.tile(en, (1, q)).ravel()
    vals = (np.asarray(a_patch)[:, None, None] * kloc[None]).ravel()
    n = layout.n_fine_nodes
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def patch_basis(layout: PatchLayout) -> np.ndarray:
    """Fine nodal values of the patch coarse basis functions (patch fine nodes, coarse nodes)."""
    mesh = layout.mesh
    lam = coarse_basis_on_fine(mesh.d, mesh.refinement)
    out = np.zeros((layout.n_fine_nodes, layout.n_coarse_nodes))
    en = layout.coarse_element_fine_nodes
    cn = layout.coarse_element_nodes
    for K in range(layout.n_coarse_elements):
        out[np.ix_(en[K], cn[K])] = lam
    return out


def local_stiffness_matrix(a_patch, corrector: CorrectorBasis, layout: PatchLayout) -> LocalStiffness:
    """b_T(lambda_j, lambda_k) by global fine-grid assembly on the patch."""
    a_patch = np.asarray(a_patch, dtype=float)
    K_U = patch_stiffness(a_patch, layout)
    chi = np.zeros_like(a_patch)
    chi[layout.center_fine_elements] = 1.0
    K_T = patch_stiffness(a_patch * chi, layout)
    lam = patch_basis(layout)
    center_nodes = layout.coarse_element_nodes[layout.center_local]
    lam_T = lam[:, center_nodes]
    b = lam.T @ (K_T @ lam_T - K_U @ corrector.values)
    return LocalStiffness(entries=b.T)


def row_sum_check(stiffness: LocalStiffness) -> float:
    """Largest absolute row sum over the patch columns (zero in exact arithmetic)."""
    return float(np.abs(stiffness.entries.sum(axis=1)).max())
