"""Offline phase: correctors and local stiffness matrices of A_0..A_N, plus persistence."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastcrc import crc64

from .coefficient import PeriodicModel, offline_coefficients
from .corrector import PatchSolver, patch_solver
from .interpolation import build_interpolation, prolongation
from .linalg import SolverError
from .mesh import ConfigurationError, NestedMesh, grid_coords, patch_layout

MAGIC = b"LODB"
FORMAT_VERSION = 1
_ARRAYS = ("coefficients", "local_matrices", "corrector_values", "load")


class DatabaseError(IOError):
    """An offline database file cannot be read."""


class VersionError(DatabaseError):
    pass


class ChecksumError(DatabaseError):
    pass


class TruncatedError(ChecksumError):
    """The file ends early; a special case of a failed integrity check."""


class CapabilityError(RuntimeError):
    """The database lacks data needed by the requested operation."""


FORCING = {
    "sin1d": ("8*pi^2*sin(2*pi*x)", lambda x: 8 * np.pi**2 * np.sin(2 * np.pi * x[:, 0])),
    "sin2d": (
        "8*pi^2*sin(2*pi*x1)*cos(2*pi*x2)",
        lambda x: 8 * np.pi**2 * np.sin(2 * np.pi * x[:, 0]) * np.cos(2 * np.pi * x[:, 1]),
    ),
    "zero": ("0", lambda x: np.zeros(len(x))),
}


def forcing(name: str):
    try:
        return FORCING[name][1]
    except KeyError:
        raise ConfigurationError(f"unknown forcing {name!r}; known: {sorted(FORCING)}") from None


def default_forcing(d: int) -> str:
    return "sin1d" if d == 1 else "sin2d"


def fine_load(mesh: NestedMesh, f, order: int = 6) -> np.ndarray:
    """(f, phi_z) for every fine node z; ``order``-point Gauss rule per axis on each fine element."""
    d, h = mesh.d, mesh.h
    g, gw = np.polynomial.legendre.leggauss(order)
    g, gw = 0.5 * (g + 1.0), 0.5 * gw
    pts = grid_coords((order,) * d)
    xi = g[pts]  # (order**d, d) reference quadrature points
    w = np.prod(gw[pts], axis=1) * h**d
    corners = grid_coords((2,) * d)
    # bilinear shape functions at the quadrature points, (points, corners)
    phi = np.prod(np.where(corners[None] == 1, xi[:, None], 1.0 - xi[:, None]), axis=2)
    origin = grid_coords((mesh.nh,) * d) * h
    contrib = np.empty((len(origin), len(corners)))
    # chunks keep the point array small on fine 2D grids
    step = max(1, 2**20 // len(xi))
    for s in range(0, len(origin), step):
        x = origin[s : s + step, None, :] + h * xi[None]
        fx = np.asarray(f(x.reshape(-1, d)), dtype=float).reshape(-1, len(xi))
        contrib[s : s + step] = (fx * w) @ phi
    return np.bincount(mesh.fine_element_nodes.ravel(), contrib.ravel(), minlength=mesh.n_fine)


def load_vector(mesh: NestedMesh, f) -> np.ndarray:
    """F(lambda_k) for all coarse nodes (coarse hats are Q1 on every fine element)."""
    return prolongation(mesh).T @ fine_load(mesh, f)


@dataclass(eq=False)
class OfflineDatabase:
    mesh: NestedMesh
    m: int
    model: dict
    interpolation: str
    forcing: str
    coefficients: np.ndarray = field(repr=False)  # (N+1, patch fine elements)
    local_matrices: np.ndarray = field(repr=False)  # (N+1, 2**d, patch coarse nodes)
    corrector_values: np.ndarray | None = field(repr=False)  # (N+1, patch fine nodes, 2**d)
    load: np.ndarray = field(repr=False)  # (coarse nodes,)
    format_version: int = FORMAT_VERSION

    @property
    def n_offline(self) -> int:
        """N, the number of single-defect coefficients."""
        return len(self.coefficients) - 1

    @property
    def layout(self):
        return patch_layout(self.mesh, self.m)

    def require_correctors(self):
        if self.corrector_values is None:
            raise CapabilityError("database was built without corrector data")
        return self.corrector_values

    def corrector_gradients(self, i: int) -> np.ndarray:
        """Gradients of C(A_i) lambda_j at the fine element centers, (elements, d, 2**d)."""
        from .corrector import CorrectorBasis

        return CorrectorBasis(self.layout, self.require_correctors()[i]).gradients()

    def descriptor(self) -> dict:
        mesh = self.mesh
        return {
            "mesh": {"d": mesh.d, "nH": mesh.nH, "nh": mesh.nh, "nEps": mesh.n_eps},
            "m": self.m,
            "model": self.model,
            "interpolation": self.interpolation,
            "forcing": self.forcing,
        }


def _element_of_cell(layout) -> np.ndarray:
    """Local coarse element holding each local defect cell."""
    owner = np.empty(layout.n_fine_elements, dtype=int)
    owner[layout.coarse_element_fine_elements] = np.arange(layout.n_coarse_elements)[:, None]
    out = np.empty(layout.n_cells, dtype=int)
    out[layout.fine_element_cell] = owner
    return out


def build_offline(
    model: PeriodicModel,
    mesh: NestedMesh,
    m: int,
    f="auto",
    interpolation: str = "averagedL2",
    keep_correctors: bool = True,
) -> OfflineDatabase:
    """Correctors and b_T^i for the reference element T=0 and every offline coefficient."""
    if f == "auto":
        f = default_forcing(mesh.d)
    fname = f if isinstance(f, str) else getattr(f, "__name__", "callable")
    ffun = forcing(f) if isinstance(f, str) else f
    layout = patch_layout(mesh, m)
    interp = build_interpolation(mesh, interpolation)
    solver: PatchSolver = patch_solver(layout, interp)
    coeffs = offline_coefficients(model, layout)
    owner = _element_of_cell(layout)
    base = solver.condense_patch(coeffs[0])
    q = 2**mesh.d
    n = len(coeffs)
    local = np.empty((n, q, layout.n_coarse_nodes))
    values = np.empty((n, layout.n_fine_nodes, q)) if keep_correctors else None
    for i in range(n):
        blocks = base
        if i > 0:
            # A_i differs from A_0 inside a single coarse element
            K = owner[i - 1]
            a_elem = coeffs[i][layout.coarse_element_fine_elements[K]][None]
            blocks = base.replace([K], solver.condenser.condense(a_elem, solver.h_scale))
        try:
            corr, b = solver.solve(blocks)
        except SolverError as exc:
            raise SolverError(f"offline coefficient A_{i}: {exc}") from exc
        local[i] = b.entries
        if keep_correctors:
            values[i] = corr.values
    return OfflineDatabase(
        mesh=mesh,
        m=m,
        model=model.descriptor(),
        interpolation=interpolation,
        forcing=fname,
        coefficients=coeffs,
        local_matrices=local,
        corrector_values=values,
        load=load_vector(mesh, ffun),
    )


def save_database(db: OfflineDatabase, path) -> None:
    """LODB file: magic, u32 version, u32 header length, JSON header, float64 arrays, CRC64."""
    arrays = {name: getattr(db, name) for name in _ARRAYS if getattr(db, name) is not None}
    header = db.descriptor()
    header["arrays"] = [[name, list(a.shape)] for name, a in arrays.items()]
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", db.format_version, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values()]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<Q", crc64.xz(body)))


def load_database(path) -> OfflineDatabase:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        if len(raw) < 12 and MAGIC.startswith(raw[:4]):
            raise TruncatedError(f"{path}: file ends inside the preamble ({len(raw)} bytes)")
        raise DatabaseError(f"{path}: not an offline database (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: file format version {version}, reader supports {FORMAT_VERSION}")
    if len(raw) < 12 + hlen + 8:
        raise TruncatedError(f"{path}: file ends inside the header")
    try:
        header = json.loads(raw[12 : 12 + hlen])
    except ValueError as exc:
        raise ChecksumError(f"{path}: corrupt header") from exc
    sizes = [int(np.prod(shape)) * 8 for _, shape in header["arrays"]]
    expected = 12 + hlen + sum(sizes) + 8
    if len(raw) < expected:
        raise TruncatedError(f"{path}: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise ChecksumError(f"{path}: {len(raw) - expected} trailing bytes")
    (stored,) = struct.unpack("<Q", raw[-8:])
    if crc64.xz(raw[:-8]) != stored:
        raise ChecksumError(f"{path}: CRC64 mismatch")
    arrays, pos = {}, 12 + hlen
    for (name, shape), size in zip(header["arrays"], sizes):
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
        pos += size
    mesh_d = header["mesh"]
    mesh = NestedMesh(d=mesh_d["d"], nH=mesh_d["nH"], nh=mesh_d["nh"], n_eps=mesh_d["nEps"])
    return OfflineDatabase(
        mesh=mesh,
        m=header["m"],
        model=header["model"],
        interpolation=header["interpolation"],
        forcing=header["forcing"],
        coefficients=arrays["coefficients"],
        local_matrices=arrays["local_matrices"],
        corrector_values=arrays.get("corrector_values"),
        load=arrays["load"],
        format_version=version,
    )
