"""One-dimensional theory: harmonic means and the a priori consistency bound.

With nodal interpolation and m = 0 the PG-LOD on a 1D element reduces to
the FEM with the elementwise harmonic mean of the coefficient, and the
offline-online variant to the FEM with the mu-weighted harmonic means.
Everything here is evaluated by exact sums over fine elements.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .coefficient import DataError, DefectSample, PeriodicModel, cell_values, realize, sample_defects
from .linalg import sparse_solve
from .mesh import NestedMesh
from .reference import coarse_mass


@dataclass(frozen=True, eq=False)
class HarmonicSummary:
    a_harm: np.ndarray = field(repr=False)
    a_harm_mu: np.ndarray = field(repr=False)
    a_bar: float
    a_bar_def: float
    theta_def: np.ndarray = field(repr=False)
    bound: np.ndarray = field(repr=False)  # per-element appendix bound


def harmonic_mean(a_field, T: int, mesh: NestedMesh) -> float:
    """(|T|^-1 int_T 1/A)^-1 for coarse element T of a 1D mesh."""
    a = np.asarray(a_field, dtype=float)[mesh.coarse_element_fine_elements[T]]
    if np.any(a <= 0):
        raise DataError("harmonic mean needs a positive coefficient")
    return float(len(a) / np.sum(1.0 / a))


def harmonic_means(a_field, mesh: NestedMesh) -> np.ndarray:
    a = np.asarray(a_field, dtype=float)[mesh.coarse_element_fine_elements]
    if np.any(a <= 0):
        raise DataError("harmonic mean needs a positive coefficient")
    return a.shape[1] / np.sum(1.0 / a, axis=1)


def cell_integrals(model: PeriodicModel, eps: float):
    """(Abar, Abar_def): int over one cell of 1/A_eps, and of the defect change of 1/A."""
    if model.d != 1:
        raise DataError("cell integrals are defined for d = 1")
    h_cell = eps / len(model.a_cell)
    a_bar = float(np.sum(h_cell / model.a_cell))
    a_bar_def = float(np.sum(h_cell / (model.a_cell + model.b_cell) - h_cell / model.a_cell))
    return a_bar, a_bar_def


@dataclass(frozen=True, eq=False)
class OneDDatabase:
    """Offline harmonic means A_harm^i on the reference element (m = 0)."""

    model: PeriodicModel
    mesh: NestedMesh
    a_harm_offline: np.ndarray  # (N+1,)

    @property
    def n_cells(self) -> int:
        return len(self.a_harm_offline) - 1


def build_oned(model: PeriodicModel, mesh: NestedMesh) -> OneDDatabase:
    if mesh.d != 1:
        raise DataError("the 1D database needs a 1D mesh")
    n = mesh.cells_per_element
    rc = mesh.cell_refinement
    a_cell, b_cell = cell_values(model, mesh)
    a0 = np.tile(a_cell, n)
    out = [len(a0) / np.sum(1.0 / a0)]
    for i in range(n):
        ai = a0.copy()
        ai[i * rc : (i + 1) * rc] += b_cell
        out.append(len(ai) / np.sum(1.0 / ai))
    return OneDDatabase(model=model, mesh=mesh, a_harm_offline=np.array(out))


def combined_harmonic(db: OneDDatabase, mu) -> float:
    """A_harm^mu = sum_i mu_i A_harm^i."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != db.a_harm_offline.shape:
        raise DataError(f"mu has length {mu.size}, expected {db.a_harm_offline.size}")
    idx = np.flatnonzero(mu)
    return float(np.dot(mu[idx], db.a_harm_offline[idx]))


def combined_harmonic_closed(n: int, n_def, a_bar: float, a_bar_def: float, size_T: float):
    """Closed form |T|/(N Abar) - N_def Abar_def |T| / (N Abar (N Abar + Abar_def))."""
    na = n * a_bar
    return size_T / na - np.asarray(n_def) * a_bar_def * size_T / (na * (na + a_bar_def))


def consistency_bound(model: PeriodicModel, H: float, theta_def, eps: float | None = None) -> float:
    """(beta/alpha) ((beta - alpha)/alpha)^2 |Q|^2 (eps/H theta + 2 theta^2)."""
    a, b = model.alpha, model.beta
    eps = model.params.get("eps") if eps is None else eps
    if eps is None:
        raise DataError("consistency_bound needs the cell size eps")
    theta = np.asarray(theta_def, dtype=float)
    return (b / a) * ((b - a) / a) ** 2 * model.q_measure**2 * (eps / H * theta + 2 * theta**2)


def appendix_bound(model: PeriodicModel, H: float, eps: float, theta_def):
    """Per-element bound on |A_harm - A_harm^mu|."""
    a, b = model.alpha, model.beta
    c = model.q_measure**2 * b**3 * (1 / a - 1 / b) ** 2
    theta = np.asarray(theta_def, dtype=float)
    return c * (eps / H) * theta + 2 * c * theta**2


def summarize(model: PeriodicModel, mesh: NestedMesh, bits, db: OneDDatabase | None = None):
    """Harmonic means of a sample and their offline-online counterparts on every element."""
    db = build_oned(model, mesh) if db is None else db
    bits = np.asarray(bits, dtype=bool)
    a = realize(model, DefectSample(bits=bits, seed=0), mesh)
    n = mesh.cells_per_element
    cells = bits.reshape(mesh.nH, n)  # cells of element T are contiguous in 1D
    a_harm = harmonic_means(a, mesh)
    a_mu = np.empty(mesh.nH)
    for T in range(mesh.nH):
        mu = np.concatenate([[1.0 - cells[T].sum()], cells[T].astype(float)])
        a_mu[T] = combined_harmonic(db, mu)
    a_bar, a_bar_def = cell_integrals(model, mesh.eps)
    theta = cells.sum(axis=1) / n
    return HarmonicSummary(
        a_harm=a_harm,
        a_harm_mu=a_mu,
        a_bar=a_bar,
        a_bar_def=a_bar_def,
        theta_def=theta,
        bound=appendix_bound(model, mesh.H, mesh.eps, theta),
    )


def coarse_fem_1d(a_elem, mesh: NestedMesh, load) -> np.ndarray:
    """P1 FEM on the coarse 1D torus with elementwise coefficient, zero mean."""
    nH, H = mesh.nH, mesh.H
    left = np.arange(nH)
    right = (left + 1) % nH
    k = np.asarray(a_elem, dtype=float) / H
    rows = np.concatenate([left, right, left, right])
    cols = np.concatenate([left, right, right, left])
    vals = np.concatenate([k, k, -k, -k])
    K = sparse.coo_matrix((vals, (rows, cols)), shape=(nH, nH)).tocsr()
    c = np.full(nH, H)
    M = sparse.bmat([[K, sparse.csr_matrix(c[:, None])], [sparse.csr_matrix(c[None, :]), None]])
    return sparse_solve(M.tocsc(), np.concatenate([load, [0.0]]), kind="symmetric-indefinite")[:nH]


@dataclass(frozen=True, eq=False)
class BoundReport:
    n_samples: int
    violations: list
    max_ratio: float
    rms_harm_error: float  # RMS over samples of max_T |A_harm - A_harm^mu|
    rms_rel_l2: float  # RMS relative L2 error of the coarse solutions


def verify_consistency_bound(model: PeriodicModel, mesh: NestedMesh, n_samples: int, seed: int, load=None):
    """Check the per-element appendix bound on every sample and element."""
    db = build_oned(model, mesh)
    violations, ratio, harm_err, rel = [], 0.0, [], []
    M = coarse_mass(mesh) if load is not None else None
    for s in range(n_samples):
        sample = sample_defects(model, mesh.n_cells, seed, s)
        summ = summarize(model, mesh, sample.bits, db)
        diff = np.abs(summ.a_harm - summ.a_harm_mu)
        bad = np.flatnonzero(diff > summ.bound * (1 + 1e-12) + 1e-15)
        violations += [(seed, s, int(T), float(diff[T]), float(summ.bound[T])) for T in bad]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(summ.bound > 0, diff / summ.bound, 0.0)
        ratio = max(ratio, float(r.max()))
        harm_err.append(diff.max())
        if load is not None:
            u = coarse_fem_1d(summ.a_harm, mesh, load)
            ut = coarse_fem_1d(summ.a_harm_mu, mesh, load)
            rel.append(np.sqrt((u - ut) @ M @ (u - ut) / (u @ M @ u)))
    return BoundReport(n_samples, violations, ratio, rms(harm_err), rms(rel))


def rms(values) -> float:
    return float(np.sqrt(np.mean(np.square(values)))) if len(values) else float("nan")
