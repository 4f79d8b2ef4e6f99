import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defectlod.interpolation import build_interpolation, prolongation
from defectlod.mesh import ConfigurationError, build_mesh

MESHES = [(1, 4, 3), (1, 5, 2), (2, 4, 2), (2, 3, 3)]


@pytest.mark.parametrize("d, nH, r", MESHES)
def test_constants_preserved(d, nH, r):
    mesh = build_mesh(d, nH, r, nH)
    I = build_interpolation(mesh)
    assert np.allclose(I(np.full(mesh.n_fine, 2.5)), 2.5, atol=1e-13)


@pytest.mark.parametrize("d, nH, r", MESHES)
def test_hat_reproduced(d, nH, r):
    mesh = build_mesh(d, nH, r, nH)
    P = prolongation(mesh)
    for kind in ("averagedL2", "nodal1d") if d == 1 else ("averagedL2",):
        M = build_interpolation(mesh, kind).matrix @ P
        assert np.abs(M - np.eye(mesh.n_coarse)).max() < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(MESHES), st.integers(0, 2**32 - 1))
def test_idempotence(geom, seed):
    d, nH, r = geom
    mesh = build_mesh(d, nH, r, nH)
    I, P = build_interpolation(mesh), prolongation(mesh)
    v = np.random.default_rng(seed).standard_normal(mesh.n_fine)
    assert np.abs(I(P @ I(v)) - I(v)).max() < 1e-12 * max(1.0, np.abs(v).max())


def test_locality():
    mesh = build_mesh(2, 4, 2, 4)
    I = build_interpolation(mesh).matrix.tocsr()
    x = mesh.fine_node_coords()
    for z in range(mesh.n_coarse):
        zc = np.array([z % 4, z // 4]) * mesh.H
        cols = I[z].indices
        dist = np.abs(((x[cols] - zc + 0.5) % 1.0) - 0.5)
        assert np.all(dist <= mesh.H + 1e-12)


def test_nodal_needs_1d():
    with pytest.raises(ConfigurationError):
        build_interpolation(build_mesh(2, 4, 2, 4), "nodal1d")
