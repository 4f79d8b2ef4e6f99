"""The computable consistency indicator E_T.

E_T**2 is the largest generalized eigenvalue of the pencil (S, B) on the
complement of constants, where S is the Gram matrix of the fields

    w_j = (A - Abar) A^{-1/2} chi_T grad(lambda_j)
          - sum_i mu_i (A - A_i) A^{-1/2} grad(C(A_i) lambda_j)

and B is the element energy matrix of the corner basis functions of T.
All integrands are piecewise bilinear products, integrated exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corrector import patch_basis, patch_stiffness
from .linalg import constant_complement, gen_eig_max, local_stiffness
from .mesh import PatchLayout
from .offline import OfflineDatabase


@dataclass(frozen=True, eq=False)
class IndicatorMatrices:
    S: np.ndarray
    B: np.ndarray


def center_basis(layout: PatchLayout) -> np.ndarray:
    """Patch fine nodal values of the corner basis functions of the center element."""
    return patch_basis(layout)[:, layout.coarse_element_nodes[layout.center_local]]


def indicator_fields(a_patch, db: OfflineDatabase, mu) -> np.ndarray:
    """Nodal values of w_j per fine element, shape (fine elements, 2**d, 2**d).

    Each w_j is a Q1 function times an elementwise constant; the returned
    local vectors already carry that constant.
    """
    values = db.require_correctors()
    layout = db.layout
    a = np.asarray(a_patch, dtype=float)
    mu = np.asarray(mu, dtype=float)
    idx = np.flatnonzero(mu)
    inv_sqrt = 1.0 / np.sqrt(a)
    abar = np.tensordot(mu[idx], db.coefficients[idx], axes=1)
    chi = np.zeros_like(a)
    chi[layout.center_fine_elements] = 1.0
    en = layout.fine_element_nodes
    lam = center_basis(layout)[en]  # (elements, corners, q)
    # (A - A_i) vanishes identically where A agrees with A_i
    out = ((chi * (a - abar) * inv_sqrt)[:, None, None]) * lam
    for i in idx:
        c = mu[i] * (a - db.coefficients[i]) * inv_sqrt
        if np.any(c):
            out -= c[:, None, None] * values[i][en]
    return out


def compute_SB(a_patch, db: OfflineDatabase, mu) -> IndicatorMatrices:
    layout = db.layout
    mesh = layout.mesh
    kloc = local_stiffness(mesh.d, mesh.h)
    w = indicator_fields(a_patch, db, mu)
    S = np.einsum("eaj,ab,ebk->jk", w, kloc, w)
    a = np.asarray(a_patch, dtype=float)
    cfe = layout.center_fine_elements
    lam = center_basis(layout)[layout.fine_element_nodes[cfe]]
    B = np.einsum("e,eaj,ab,ebk->jk", a[cfe], lam, kloc, lam)
    return IndicatorMatrices(S=0.5 * (S + S.T), B=0.5 * (B + B.T))


def indicator_ET(matrices: IndicatorMatrices) -> float:
    """sqrt of the largest eigenvalue of S v = nu B v modulo constants."""
    P = constant_complement(len(matrices.S))
    nu, _ = gen_eig_max(P.T @ matrices.S @ P, P.T @ matrices.B @ P)
    return float(np.sqrt(nu))


def energy_matrices(a_patch, layout: PatchLayout):
    """(||v||_{A,T}^2, ||w||_{A,U}^2) Gram matrices over T corners and patch coarse nodes."""
    lam = patch_basis(layout)
    a = np.asarray(a_patch, dtype=float)
    chi = np.zeros_like(a)
    chi[layout.center_fine_elements] = 1.0
    corners = layout.coarse_element_nodes[layout.center_local]
    KT = lam[:, corners].T @ (patch_stiffness(a * chi, layout) @ lam[:, corners])
    KU = lam.T @ (patch_stiffness(a, layout) @ lam)
    return KT, KU
