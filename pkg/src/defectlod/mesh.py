"""Nested coarse/fine tensor grids on the unit torus and element patches.

All index maps are lexicographic with axis 0 running fastest.  On the torus
the number of nodes per axis equals the number of elements per axis and
node ``i`` is the lower-left corner of element ``i``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    """Mesh or campaign parameters violate a structural constraint."""


def ravel(coords, n: int) -> np.ndarray:
    """Lexicographic index of integer coordinates (..., d) on an n**d torus."""
    coords = np.asarray(coords)
    d = coords.shape[-1]
    return np.sum(np.mod(coords, n) * n ** np.arange(d), axis=-1)


def unravel(index, n: int, d: int) -> np.ndarray:
    index = np.asarray(index)
    return np.stack([(index // n**a) % n for a in range(d)], axis=-1)


def grid_coords(shape) -> np.ndarray:
    """All integer points of a box of given shape, lexicographic, shape (prod, d)."""
    axes = [np.arange(s) for s in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel(order="F") for m in mesh], axis=-1)


def local_ravel(coords, shape) -> np.ndarray:
    coords = np.asarray(coords)
    strides = np.cumprod([1] + list(shape[:-1]))
    return np.sum(coords * strides, axis=-1)


@dataclass(frozen=True)
class NestedMesh:
    d: int
    nH: int
    nh: int
    n_eps: int

    @property
    def refinement(self) -> int:
        return self.nh // self.nH

    @property
    def cell_refinement(self) -> int:
        """Fine elements per axis inside one defect cell."""
        return self.nh // self.n_eps

    @property
    def cells_per_element(self) -> int:
        """Defect cells per axis inside one coarse element."""
        return self.n_eps // self.nH

    @property
    def H(self) -> float:
        return 1.0 / self.nH

    @property
    def h(self) -> float:
        return 1.0 / self.nh

    @property
    def eps(self) -> float:
        return 1.0 / self.n_eps

    @property
    def n_coarse(self) -> int:
        return self.nH**self.d

    @property
    def n_fine(self) -> int:
        return self.nh**self.d

    @property
    def n_cells(self) -> int:
        return self.n_eps**self.d

    @functools.cached_property
    def coarse_element_nodes(self) -> np.ndarray:
        """(n_coarse, 2**d) global coarse node indices of each coarse element."""
        corners = grid_coords((2,) * self.d)
        coords = unravel(np.arange(self.n_coarse), self.nH, self.d)
        return ravel(coords[:, None, :] + corners[None], self.nH)

    @functools.cached_property
    def fine_element_nodes(self) -> np.ndarray:
        """(n_fine, 2**d) global fine node indices of each fine element."""
        corners = grid_coords((2,) * self.d)
        coords = unravel(np.arange(self.n_fine), self.nh, self.d)
        return ravel(coords[:, None, :] + corners[None], self.nh)

    @functools.cached_property
    def coarse_element_fine_elements(self) -> np.ndarray:
        """(n_coarse, r**d) fine elements contained in each coarse element."""
        r = self.refinement
        inner = grid_coords((r,) * self.d)
        coords = unravel(np.arange(self.n_coarse), self.nH, self.d) * r
        return ravel(coords[:, None, :] + inner[None], self.nh)

    @functools.cached_property
    def coarse_neighbors(self) -> np.ndarray:
        """(n_coarse, 3**d) coarse elements sharing a closure point, incl. itself."""
        offsets = grid_coords((3,) * self.d) - 1
        coords = unravel(np.arange(self.n_coarse), self.nH, self.d)
        return ravel(coords[:, None, :] + offsets[None], self.nH)

    def fine_element_cells(self) -> np.ndarray:
        """Defect cell index of every fine element."""
        coords = unravel(np.arange(self.n_fine), self.nh, self.d)
        return ravel(coords // self.cell_refinement, self.n_eps)

    def fine_element_centers(self) -> np.ndarray:
        coords = unravel(np.arange(self.n_fine), self.nh, self.d)
        return (coords + 0.5) * self.h

    def fine_node_coords(self) -> np.ndarray:
        return unravel(np.arange(self.n_fine), self.nh, self.d) * self.h


def build_mesh(d: int, nH: int, refinement: int, n_eps: int) -> NestedMesh:
    """Validate divisibility constraints and return the nested torus mesh."""
    if d not in (1, 2):
        raise ConfigurationError(f"dimension d={d} not supported (1 or 2)")
    if nH < 2:
        raise ConfigurationError(f"nH={nH} must be at least 2")
    if refinement < 1:
        raise ConfigurationError(f"refinement={refinement} must be at least 1")
    if n_eps < 1 or n_eps % nH:
        raise ConfigurationError(
            f"nEps={n_eps} must be a multiple of nH={nH} (H a multiple of eps)"
        )
    nh = nH * refinement
    if nh % n_eps:
        raise ConfigurationError(
            f"nh=nH*refinement={nh} must be a multiple of nEps={n_eps} (fine mesh resolves cells)"
        )
    return NestedMesh(d=d, nH=nH, nh=nh, n_eps=n_eps)


@dataclass(frozen=True, eq=False)
class PatchLayout:
    """Local index structure of an m-layer patch; identical for every center."""

    mesh: NestedMesh
    m: int
    shape: tuple  # coarse elements per axis
    periodic: tuple  # axis wraps onto itself (patch spans the torus there)
    offset: tuple  # local coarse coordinates of the center element
    coarse_element_coords: np.ndarray = field(repr=False)
    coarse_node_coords: np.ndarray = field(repr=False)
    fine_element_coords: np.ndarray = field(repr=False)
    fine_node_coords: np.ndarray = field(repr=False)
    cell_coords: np.ndarray = field(repr=False)
    fine_shape: tuple = ()
    fine_node_shape: tuple = ()
    coarse_node_shape: tuple = ()
    cell_shape: tuple = ()

    @property
    def n_coarse_elements(self) -> int:
        return len(self.coarse_element_coords)

    @property
    def n_coarse_nodes(self) -> int:
        return len(self.coarse_node_coords)

    @property
    def n_fine_elements(self) -> int:
        return len(self.fine_element_coords)

    @property
    def n_fine_nodes(self) -> int:
        return len(self.fine_node_coords)

    @property
    def n_cells(self) -> int:
        return len(self.cell_coords)

    @property
    def center_local(self) -> int:
        return int(local_ravel(np.array(self.offset), self.shape))

    def _wrap_nodes(self, coords, node_shape):
        out = coords.copy()
        for a in range(self.mesh.d):
            if self.periodic[a]:
                out[..., a] %= node_shape[a]
        return local_ravel(out, node_shape)

    @functools.cached_property
    def fine_element_nodes(self) -> np.ndarray:
        """(n_fine_elements, 2**d) local fine node indices."""
        corners = grid_coords((2,) * self.mesh.d)
        c = self.fine_element_coords[:, None, :] + corners[None]
        return self._wrap_nodes(c, self.fine_node_shape)

    @functools.cached_property
    def coarse_element_nodes(self) -> np.ndarray:
        """(n_coarse_elements, 2**d) local coarse node indices."""
        corners = grid_coords((2,) * self.mesh.d)
        c = self.coarse_element_coords[:, None, :] + corners[None]
        return self._wrap_nodes(c, self.coarse_node_shape)

    @functools.cached_property
    def coarse_element_fine_nodes(self) -> np.ndarray:
        """(n_coarse_elements, (r+1)**d) local fine nodes of each coarse element."""
        r = self.mesh.refinement
        inner = grid_coords((r + 1,) * self.mesh.d)
        c = self.coarse_element_coords[:, None, :] * r + inner[None]
        return self._wrap_nodes(c, self.fine_node_shape)

    @functools.cached_property
    def coarse_element_fine_elements(self) -> np.ndarray:
        """(n_coarse_elements, r**d) local fine elements of each coarse element."""
        r = self.mesh.refinement
        inner = grid_coords((r,) * self.mesh.d)
        c = self.coarse_element_coords[:, None, :] * r + inner[None]
        return local_ravel(c, self.fine_shape)

    @functools.cached_property
    def fine_element_cell(self) -> np.ndarray:
        """Local defect cell index of every local fine element."""
        c = self.fine_element_coords // self.mesh.cell_refinement
        return local_ravel(c, self.cell_shape)

    @functools.cached_property
    def fine_element_in_cell(self) -> np.ndarray:
        """Position of every local fine element inside its defect cell."""
        rc = self.mesh.cell_refinement
        return local_ravel(self.fine_element_coords % rc, (rc,) * self.mesh.d)

    @functools.cached_property
    def boundary_mask(self) -> np.ndarray:
        """Fine nodes on the patch boundary (homogeneous Dirichlet nodes)."""
        mask = np.zeros(self.n_fine_nodes, dtype=bool)
        for a in range(self.mesh.d):
            if not self.periodic[a]:
                ca = self.fine_node_coords[:, a]
                mask |= (ca == 0) | (ca == self.fine_node_shape[a] - 1)
        return mask

    @functools.cached_property
    def center_fine_elements(self) -> np.ndarray:
        return self.coarse_element_fine_elements[self.center_local]


@functools.lru_cache(maxsize=None)
def patch_layout(mesh: NestedMesh, m: int) -> PatchLayout:
    if m < 0:
        raise ConfigurationError(f"patch layers m={m} must be nonnegative")
    d, r = mesh.d, mesh.refinement
    shape, periodic, offset = [], [], []
    for _ in range(d):
        if 2 * m + 1 < mesh.nH:
            shape.append(2 * m + 1)
            periodic.append(False)
            offset.append(m)
        else:
            # the patch covers the whole torus along this axis
            shape.append(mesh.nH)
            periodic.append(True)
            offset.append(min(m, mesh.nH // 2))
    fine_shape = tuple(s * r for s in shape)
    fine_node_shape = tuple(s * r + (0 if p else 1) for s, p in zip(shape, periodic))
    coarse_node_shape = tuple(s + (0 if p else 1) for s, p in zip(shape, periodic))
    cell_shape = tuple(s * mesh.cells_per_element for s in shape)
    return PatchLayout(
        mesh=mesh,
        m=m,
        shape=tuple(shape),
        periodic=tuple(periodic),
        offset=tuple(offset),
        coarse_element_coords=grid_coords(shape),
        coarse_node_coords=grid_coords(coarse_node_shape),
        fine_element_coords=grid_coords(fine_shape),
        fine_node_coords=grid_coords(fine_node_shape),
        cell_coords=grid_coords(cell_shape),
        fine_shape=fine_shape,
        fine_node_shape=fine_node_shape,
        coarse_node_shape=coarse_node_shape,
        cell_shape=cell_shape,
    )


@dataclass(frozen=True, eq=False)
class PatchGeometry:
    """The m-layer patch U_m(T) of coarse element ``center`` with global index maps."""

    layout: PatchLayout
    center: int
    origin: np.ndarray  # global coarse coordinates of local coarse element 0
    shift: np.ndarray  # coarse lattice translation from the reference patch

    @property
    def mesh(self) -> NestedMesh:
        return self.layout.mesh

    @property
    def m(self) -> int:
        return self.layout.m

    @functools.cached_property
    def coarse_elements(self) -> np.ndarray:
        return ravel(self.origin + self.layout.coarse_element_coords, self.mesh.nH)

    @functools.cached_property
    def coarse_nodes(self) -> np.ndarray:
        return ravel(self.origin + self.layout.coarse_node_coords, self.mesh.nH)

    @functools.cached_property
    def fine_elements(self) -> np.ndarray:
        r = self.mesh.refinement
        return ravel(self.origin * r + self.layout.fine_element_coords, self.mesh.nh)

    @functools.cached_property
    def fine_nodes(self) -> np.ndarray:
        r = self.mesh.refinement
        return ravel(self.origin * r + self.layout.fine_node_coords, self.mesh.nh)

    @property
    def boundary_mask(self) -> np.ndarray:
        return self.layout.boundary_mask

    @functools.cached_property
    def cells(self) -> np.ndarray:
        """Global defect cell index of each local cell (lexicographic)."""
        c = self.mesh.cells_per_element
        return ravel(self.origin * c + self.layout.cell_coords, self.mesh.n_eps)


def patch(mesh: NestedMesh, T: int, m: int) -> PatchGeometry:
    """The m-layer element patch of coarse element T, wrapped on the torus."""
    layout = patch_layout(mesh, m)
    coords = unravel(T, mesh.nH, mesh.d)
    origin = coords - np.array(layout.offset)
    return PatchGeometry(layout=layout, center=int(T), origin=origin, shift=coords.copy())
