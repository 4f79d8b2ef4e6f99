"""Weakly random coefficients: periodic part plus Bernoulli-activated defects.

A coefficient is stored elementwise constant on the fine grid.  One defect
cell of side eps holds ``cell_refinement**d`` fine elements; the periodic
part and the defect part are given by their values on these fine elements.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import NestedMesh, PatchGeometry, PatchLayout, grid_coords


class DataError(ValueError):
    """Coefficient data is inconsistent (non-positive values, bad variant)."""


INCLUSION = ((0.25, 0.75),)


@dataclass(frozen=True, eq=False)
class PeriodicModel:
    d: int
    alpha: float
    beta: float
    a_cell: np.ndarray = field(repr=False)  # A_per on the fine elements of one cell
    b_cell: np.ndarray = field(repr=False)  # B_per on the fine elements of one cell
    q_box: tuple  # ((lo, hi),) * d in cell coordinates
    p: float
    name: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def cell_refinement(self) -> int:
        return round(len(self.a_cell) ** (1.0 / self.d))

    @property
    def q_measure(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.q_box]))

    def with_p(self, p: float) -> "PeriodicModel":
        if not 0.0 <= p <= 1.0:
            raise DataError(f"defect probability p={p} outside [0, 1]")
        return replace(self, p=float(p))

    def descriptor(self) -> dict:
        return {"name": self.name, "d": self.d, "p": self.p, **self.params}


@dataclass(frozen=True, eq=False)
class DefectSample:
    bits: np.ndarray = field(repr=False)  # one bool per defect cell of the torus
    seed: int
    index: int = 0

    @property
    def n_defects(self) -> int:
        return int(self.bits.sum())


def _cell_centers(d: int, rc: int) -> np.ndarray:
    return (grid_coords((rc,) * d) + 0.5) / rc


def _in_box(y: np.ndarray, box) -> np.ndarray:
    inside = np.ones(len(y), dtype=bool)
    for a, (lo, hi) in enumerate(box):
        inside &= (y[:, a] >= lo) & (y[:, a] <= hi)
    return inside


def _check_resolved(box, rc: int):
    for lo, hi in box:
        if abs(lo * rc - round(lo * rc)) > 1e-12 or abs(hi * rc - round(hi * rc)) > 1e-12:
            raise DataError(f"box {box} is not resolved by {rc} fine elements per cell")


def _finish(d, a_cell, b_cell, q_box, p, name, params) -> PeriodicModel:
    values = np.concatenate([a_cell, a_cell + b_cell])
    if np.any(values <= 0):
        raise DataError(f"model {name} produces non-positive coefficient values")
    if not 0.0 <= p <= 1.0:
        raise DataError(f"defect probability p={p} outside [0, 1]")
    # bounds over all realizable values
    alpha, beta = float(values.min()), float(values.max())
    return PeriodicModel(d, alpha, beta, a_cell, b_cell, tuple(q_box), float(p), name, params)


def checkerboard(d: int, alpha: float, beta: float, p: float, cell_refinement: int = 1):
    """Random checkerboard: each cell is alpha, or beta with probability p."""
    n = cell_refinement**d
    a_cell = np.full(n, float(alpha))
    b_cell = np.full(n, float(beta) - float(alpha))
    params = {"alpha": alpha, "beta": beta}
    return _finish(d, a_cell, b_cell, ((0.0, 1.0),) * d, p, "checkerboard", params)


def inclusions(d: int, alpha: float, beta: float, p: float, cell_refinement: int = 4):
    """Periodic inclusions of value beta on [0.25, 0.75]^d, erased by a defect."""
    box = INCLUSION * d
    _check_resolved(box, cell_refinement)
    y = _cell_centers(d, cell_refinement)
    inc = _in_box(y, box)
    a_cell = np.where(inc, float(beta), float(alpha))
    b_cell = np.where(inc, float(alpha) - float(beta), 0.0)
    params = {"alpha": alpha, "beta": beta}
    return _finish(d, a_cell, b_cell, box, p, "inclusions", params)


VARIANTS = ("value", "fill", "shift", "lshape")


def defect_variant(model: PeriodicModel, variant: str, beta_tilde: float | None = None):
    """Redefine Q and B_per of the inclusion model for a defect variant.

    value:  the inclusion takes the value ``beta_tilde``
    fill:   the whole cell takes the inclusion value beta
    shift:  the inclusion moves to [0.75, 1]^d, which also halves its side
    lshape: [0.5, 0.75]^d is carved out of the inclusion
    """
    if model.name != "inclusions":
        raise DataError("defect variants are defined for the inclusion model only")
    d, rc = model.d, model.cell_refinement
    alpha, beta = model.params["alpha"], model.params["beta"]
    y = _cell_centers(d, rc)
    inc = _in_box(y, INCLUSION * d)
    params = {"alpha": alpha, "beta": beta, "variant": variant}
    if variant == "value":
        if beta_tilde is None or beta_tilde <= 0:
            raise DataError(f"value variant needs a positive defect value, got {beta_tilde}")
        b_cell = np.where(inc, beta_tilde - beta, 0.0)
        box = INCLUSION * d
        params["beta_tilde"] = beta_tilde
    elif variant == "fill":
        b_cell = np.where(inc, 0.0, beta - alpha)
        box = ((0.0, 1.0),) * d
    elif variant == "shift":
        _check_resolved(((0.75, 1.0),) * d, rc)
        b_cell = np.where(inc, alpha - beta, 0.0)
        b_cell = np.where(_in_box(y, ((0.75, 1.0),) * d), beta - alpha, b_cell)
        box = ((0.0, 1.0),) * d
    elif variant == "lshape":
        carve = ((0.5, 0.75),) * d
        _check_resolved(carve, rc)
        b_cell = np.where(_in_box(y, carve), alpha - beta, 0.0)
        box = carve
    else:
        raise DataError(f"unknown defect variant {variant!r}; expected one of {VARIANTS}")
    return _finish(d, model.a_cell.copy(), b_cell, box, model.p, "inclusions", params)


def sample_defects(model: PeriodicModel, n_cells: int, seed: int, index: int = 0):
    """Bernoulli(p) bit per defect cell, reproducible from (seed, index).

    A Philox stream keyed by (seed, index) assigns its j-th draw to cell j,
    so a sample does not depend on how or in which order it is evaluated.
    """
    if not 0.0 <= model.p <= 1.0:
        raise DataError(f"defect probability p={model.p} outside [0, 1]")
    key = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, np.uint64)
    u = np.random.Generator(np.random.Philox(key=key)).random(n_cells)
    return DefectSample(bits=u < model.p, seed=int(seed), index=int(index))


def cell_values(model: PeriodicModel, mesh: NestedMesh):
    """A_per and B_per on the fine elements of one cell of ``mesh``.

    A model given on a coarser cell grid is refined by repetition when the
    mesh resolution is a multiple of it.
    """
    rm, rc = model.cell_refinement, mesh.cell_refinement
    if mesh.d != model.d or rc % rm:
        raise DataError(
            f"model resolved with {rm} fine elements per cell cannot be "
            f"represented on a mesh with {rc} (d={mesh.d})"
        )
    k = rc // rm
    if k == 1:
        return model.a_cell, model.b_cell
    fine = grid_coords((rc,) * mesh.d) // k
    src = np.sum(fine * rm ** np.arange(mesh.d), axis=1)
    return model.a_cell[src], model.b_cell[src]


def realize(model: PeriodicModel, sample: DefectSample, where) -> np.ndarray:
    """Fine-element values of A = A_eps + b B_eps on the torus or on a patch."""
    mesh = where.mesh if isinstance(where, PatchGeometry) else where
    if len(sample.bits) != mesh.n_cells:
        raise DataError(f"sample has {len(sample.bits)} cells, lattice has {mesh.n_cells}")
    if isinstance(where, PatchGeometry):
        mesh, layout = where.mesh, where.layout
        a_cell, b_cell = cell_values(model, mesh)
        pos = layout.fine_element_in_cell
        bits = sample.bits[where.cells[layout.fine_element_cell]]
    else:
        mesh = where
        a_cell, b_cell = cell_values(model, mesh)
        rc = mesh.cell_refinement
        coords = grid_coords((mesh.nh,) * mesh.d)
        strides = rc ** np.arange(mesh.d)
        pos = np.sum((coords % rc) * strides, axis=1)
        bits = sample.bits[mesh.fine_element_cells()]
    values = a_cell[pos] + bits * b_cell[pos]
    if np.any(values <= 0):
        raise DataError("realized coefficient is not positive")
    return values


def offline_coefficients(model: PeriodicModel, layout: PatchLayout) -> np.ndarray:
    """A_0..A_N on the reference patch, shape (N+1, fine elements of the patch).

    A_i for i >= 1 carries a single defect in local cell i-1 (lexicographic).
    """
    a_cell, b_cell = cell_values(model, layout.mesh)
    pos = layout.fine_element_in_cell
    a0 = a_cell[pos]
    n = layout.n_cells
    out = np.repeat(a0[None, :], n + 1, axis=0)
    cell = layout.fine_element_cell
    elems = np.arange(layout.n_fine_elements)
    out[cell + 1, elems] += b_cell[pos]
    return out


def defect_cells(sample: DefectSample, geom: PatchGeometry) -> np.ndarray:
    """Local cell indices (ascending) of the defects inside the patch."""
    return np.flatnonzero(sample.bits[geom.cells])


def extract_mu(sample: DefectSample, geom: PatchGeometry) -> np.ndarray:
    """Weights with A|_patch = sum_i mu_i A_i; mu_0 = 1 - N_def."""
    local = sample.bits[geom.cells].astype(float)
    return np.concatenate([[1.0 - local.sum()], local])
