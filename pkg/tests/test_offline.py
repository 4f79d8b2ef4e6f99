import struct

import numpy as np
import pytest

from dense_oracle import Torus
from defectlod.coefficient import checkerboard
from defectlod.corrector import patch_solver
from defectlod.interpolation import build_interpolation
from defectlod.mesh import build_mesh
from defectlod.offline import (
    FORMAT_VERSION,
    CapabilityError,
    ChecksumError,
    DatabaseError,
    VersionError,
    build_offline,
    forcing,
    load_database,
    load_vector,
    save_database,
)


def test_database_count_eps64_H32():
    mesh = build_mesh(2, 32, 2, 64)
    db = build_offline(checkerboard(2, 0.1, 1.0, 0.1), mesh, 2, keep_correctors=False)
    assert db.n_offline == 100
    assert db.local_matrices.shape == (101, 4, 36)


def test_smallest_1d():
    mesh = build_mesh(1, 4, 2, 4)
    db = build_offline(checkerboard(1, 0.1, 1.0, 0.1), mesh, 0, interpolation="nodal1d")
    assert db.n_offline == 1 and db.local_matrices.shape == (2, 2, 2)
    # m = 0 with nodal interpolation: the harmonic mean over the element
    for i, a in enumerate((0.1, 1.0)):
        assert np.allclose(db.local_matrices[i], a / mesh.H * np.array([[1, -1], [-1, 1]]))


def test_load_vector_quadrature_oracle():
    mesh = build_mesh(2, 4, 4, 4)
    f = forcing("sin2d")
    t = Torus(2, 4, 4)
    x, w = np.polynomial.legendre.leggauss(10)
    x, w = 0.5 * (x + 1), 0.5 * w
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w).ravel()
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    oracle = np.zeros(mesh.n_coarse)
    for i in range(4):
        for j in range(4):
            q = (pts + [i, j]) * mesh.H
            fq = f(q) * W * mesh.H**2
            for k in range(mesh.n_coarse):
                oracle[k] += fq @ t.hat(k, q)
    assert np.abs(load_vector(mesh, f) - oracle).max() < 1e-10


@pytest.fixture(scope="module")
def small_db():
    mesh = build_mesh(2, 6, 2, 12)
    return build_offline(checkerboard(2, 0.1, 1.0, 0.2), mesh, 1)


def test_matrices_regenerate(small_db):
    db = small_db
    solver = patch_solver(db.layout, build_interpolation(db.mesh, db.interpolation))
    for i in (0, 1, 17, db.n_offline):
        corr, b = solver.solve(solver.condense_patch(db.coefficients[i]))
        assert np.abs(b.entries - db.local_matrices[i]).max() < 1e-12
        assert np.abs(corr.values - db.corrector_values[i]).max() < 1e-12


def test_round_trip(small_db, tmp_path):
    path = tmp_path / "db.lodb"
    save_database(small_db, path)
    back = load_database(path)
    for name in ("coefficients", "local_matrices", "corrector_values", "load"):
        assert np.array_equal(getattr(back, name), getattr(small_db, name))
    assert back.mesh == small_db.mesh and back.m == small_db.m
    assert back.descriptor() == small_db.descriptor()


@pytest.mark.parametrize("keep", [5, 11, 100, -1, -9])
def test_truncation_is_checksum_error(small_db, tmp_path, keep):
    path = tmp_path / "db.lodb"
    save_database(small_db, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:keep])
    with pytest.raises(ChecksumError):
        load_database(path)


def test_corruption_detected(small_db, tmp_path):
    path = tmp_path / "db.lodb"
    save_database(small_db, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError, match="CRC64"):
        load_database(path)


def test_version_error_names_both(small_db, tmp_path):
    path = tmp_path / "db.lodb"
    save_database(small_db, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError, match=f"{FORMAT_VERSION + 1}.*{FORMAT_VERSION}"):
        load_database(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.lodb"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(DatabaseError):
        load_database(path)


def test_capability_error_without_correctors():
    mesh = build_mesh(2, 4, 2, 4)
    db = build_offline(checkerboard(2, 0.1, 1.0, 0.2), mesh, 1, keep_correctors=False)
    with pytest.raises(CapabilityError):
        db.require_correctors()
