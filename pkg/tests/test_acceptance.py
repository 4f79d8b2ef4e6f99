"""Acceptance criteria 1-7.

Every test records a one-line verdict in ``conftest.ACCEPTANCE``; the
terminal summary prints them after the run.  Criterion 7 needs
DEFECTLOD_TIMING=1.  Results are also written to results/acceptance/.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from dense_oracle import Torus, correctors, pglod_matrix
from defectlod.coefficient import (
    DefectSample,
    checkerboard,
    extract_mu,
    inclusions,
    offline_coefficients,
    realize,
    sample_defects,
)
from defectlod.corrector import patch_solver
from defectlod.experiments import (
    CampaignConfig,
    center_element,
    run_deterministic_baseline,
    run_indicator_study,
    run_mc,
    run_oned,
    run_timing,
)
from defectlod.indicator import compute_SB, energy_matrices, indicator_ET
from defectlod.interpolation import build_interpolation, prolongation
from defectlod.mesh import build_mesh, patch
from defectlod.offline import build_offline
from defectlod.online import assemble_global, combine_local, patch_maps, solve_coarse, upscale
from defectlod.reference import pglod_solve
from test_indicator import _oracle_S
from test_reference import fem_order

pytestmark = pytest.mark.acceptance
RESULTS = Path(__file__).resolve().parent.parent / "results" / "acceptance"


def record(k, ok, detail, data=None, write=True):
    ACCEPTANCE[k] = (ok, detail)
    if not write:
        return
    RESULTS.mkdir(parents=True, exist_ok=True)
    payload = {"criterion": k, "passed": ok, "detail": detail, "data": data}
    (RESULTS / f"criterion_{k}.json").write_text(json.dumps(payload, indent=2, default=float))


def slope(p, y):
    return float(np.polyfit(np.log(p), np.log(y), 1)[0])


def test_criterion_1_oned_theorem():
    t0 = time.perf_counter()
    p_grid = [0.01, 0.05, 0.1, 0.15, 0.2]
    cfg = CampaignConfig(d=1, alpha=0.1, beta=1.0, nEps=256, nH_list=[4, 8, 16, 32], p_grid=p_grid, m_samp=500, seed=2024)
    rows = run_oned(cfg.validate())
    wall = time.perf_counter() - t0
    violations = sum(r["violations"] for r in rows)
    # the slope is fitted where the quadratic term is expected to dominate
    fit_p = [0.05, 0.1, 0.15, 0.2]
    slopes = {}
    for H in sorted({r["H"] for r in rows}, reverse=True):
        ys = [r["rmsHarmError"] for r in rows if r["H"] == H and r["p"] in fit_p]
        slopes[H] = slope(fit_p, ys)
    bad = {H: s for H, s in slopes.items() if not 1.7 <= s <= 2.3}
    ok = violations == 0 and not bad and wall < 60
    detail = (
        f"violations={violations}, slopes(H)={ {f'2^{int(np.log2(H))}': round(s, 2) for H, s in slopes.items()} }, "
        f"wall={wall:.1f}s"
    )
    record(1, ok, detail, {"rows": rows, "slopes": {str(k): v for k, v in slopes.items()}, "wall": wall})
    assert violations == 0
    assert wall < 60
    assert not bad, f"log-log slopes outside [1.7, 2.3]: {bad}"


@pytest.fixture(scope="module")
def checkerboard_2d():
    cfg = CampaignConfig(alpha=0.1, beta=1.0, d=2, nH=32, refinement=8, nEps=128, m=4, m_samp=50, seed=7)
    t0 = time.perf_counter()
    db = build_offline(cfg.base_model(), cfg.mesh(), cfg.m)
    return cfg, db, time.perf_counter() - t0


def test_criterion_2_checkerboard(checkerboard_2d):
    cfg, db, t_off = checkerboard_2d
    cfg.p_grid = [0.1]
    t0 = time.perf_counter()
    mc = run_mc(cfg, db)[0]
    t_mc = time.perf_counter() - t0
    cfg.p_grid = [0.01]
    base = run_deterministic_baseline(cfg, db)[0]
    checks = {
        "relL2<=5%": mc["rmsRelL2"] <= 0.05,
        "relH1<=13%": mc["rmsRelH1"] <= 0.13,
        "baseline in [1%,4%]": 0.01 <= base["rmsRelL2"] <= 0.04,
        "offline minutes-scale": t_off < 30 * 60,
    }
    ok = all(checks.values())
    detail = (
        f"p=0.1 relL2={mc['rmsRelL2']:.4f} relH1={mc['rmsRelH1']:.4f}; baseline p=0.01 relL2={base['rmsRelL2']:.4f} "
        f"relH1={base['rmsRelH1']:.4f}; offline {t_off:.0f}s"
    )
    record(2, ok, detail, {"mc": mc, "baseline": base, "offline_s": t_off, "mc_wall_s": t_mc})
    assert ok, detail


VARIANTS = [("value", 1.0), ("value", 0.5), ("value", 5.0), ("fill", None), ("shift", None), ("lshape", None)]


def test_criterion_3_defect_variants():
    p_grid = [0.1, 0.15]
    table = {}
    for variant, bt in VARIANTS:
        cfg = CampaignConfig(
            model="inclusions", variant=variant, beta_tilde=bt, alpha=1.0, beta=10.0,
            d=2, nH=16, refinement=16, nEps=64, m=3, p_grid=p_grid, m_samp=50, seed=11,
        ).validate()
        name = variant if bt is None else f"value({bt:g})"
        table[name] = {r["p"]: r["rmsRelL2"] for r in run_mc(cfg)}
    worst = max(max(v.values()) for v in table.values())
    worst_value = max(max(v.values()) for k, v in table.items() if k.startswith("value"))
    at_01 = {k: v[0.1] for k, v in table.items()}
    fill_largest = max(at_01, key=at_01.get) == "fill"
    ok = worst < 0.05 and worst_value < 0.01 and fill_largest
    detail = "relL2 " + ", ".join(f"{k}: " + "/".join(f"{v[p]:.4f}" for p in p_grid) for k, v in table.items())
    record(3, ok, detail + f" (p={p_grid})", table)
    assert worst < 0.05
    assert worst_value < 0.01
    assert fill_largest, at_01


def test_criterion_4_exactness():
    out = {}
    cases = [
        (build_mesh(2, 8, 4, 16), checkerboard(2, 0.1, 1.0, 0.0, cell_refinement=2), 2),
        (build_mesh(2, 8, 8, 16), inclusions(2, 1.0, 10.0, 0.0), 1),
        (build_mesh(1, 16, 8, 64), checkerboard(1, 0.1, 1.0, 0.0, cell_refinement=2), 2),
    ]
    worst = 0.0
    for mesh, model, m in cases:
        db = build_offline(model, mesh, m)
        maps = patch_maps(mesh, m)

        def compare(sample):
            sysm = assemble_global(db, sample)
            u = solve_coarse(sysm, mesh)
            ums = upscale(db, sample, u).fine_values
            ref = pglod_solve(realize(model, sample, mesh), mesh, m)
            return max(
                np.abs(u - ref.coarse).max() / np.abs(ref.coarse).max(),
                np.abs(ums - ref.upscaled).max() / np.abs(ref.upscaled).max(),
            )

        # p = 0
        worst = max(worst, compare(DefectSample(np.zeros(mesh.n_cells, bool), 0)))
        # at most one defect per patch: greedy sparse pattern
        rng = np.random.default_rng(0)
        for _ in range(3):
            bits = np.zeros(mesh.n_cells, bool)
            for c in rng.permutation(mesh.n_cells):
                bits[c] = True
                if bits[maps.cells].sum(axis=1).max() > 1:
                    bits[c] = False
            worst = max(worst, compare(DefectSample(bits, 0)))
        # single-defect bit-exactness and sum mu = 1
        for i in range(1, db.n_offline + 1, max(1, db.n_offline // 7)):
            mu = np.zeros(db.n_offline + 1)
            mu[i] = 1.0
            assert np.array_equal(combine_local(db, mu), db.local_matrices[i])
        coeffs = offline_coefficients(model, patch(mesh, 0, m).layout)
        for s in range(20):
            sample = sample_defects(model.with_p(0.3), mesh.n_cells, 5, s)
            for T in rng.choice(mesh.n_coarse, 4, replace=False):
                geom = patch(mesh, T, m)
                mu = extract_mu(sample, geom)
                assert mu.sum() == 1.0
                dev = np.abs(mu @ coeffs - realize(model, sample, geom)).max()
                assert dev <= 1e-10 * model.beta
    out["max relative deviation"] = worst
    ok = worst < 1e-10
    record(4, ok, f"max deviation from per-sample PG-LOD {worst:.2e}; mu sums and decomposition exact", out)
    assert ok


@pytest.fixture(scope="module")
def indicator_setup():
    cfg = CampaignConfig(alpha=0.1, beta=1.0, d=2, nH=5, refinement=8, nEps=20, m=2, seed=31).validate()
    db = build_offline(cfg.base_model(), cfg.mesh(), cfg.m)
    return cfg, db


def test_criterion_5_indicator(indicator_setup):
    cfg, db = indicator_setup
    mesh = cfg.mesh()
    exact = []
    for i in range(0, db.n_offline + 1, 37):
        mu = np.zeros(db.n_offline + 1)
        mu[i] = 1.0
        exact.append(indicator_ET(compute_SB(db.coefficients[i], db, mu)))
    rng = np.random.default_rng(99)
    solver = patch_solver(db.layout, build_interpolation(mesh))
    worst_ratio, violations = 0.0, 0
    for draw in range(200):
        p = rng.choice([0.01, 0.05, 0.1, 0.15, 0.3])
        model = cfg.base_model(p)
        sample = sample_defects(model, mesh.n_cells, 1000 + draw)
        T = int(rng.integers(mesh.n_coarse))
        geom = patch(mesh, T, cfg.m)
        a = realize(model, sample, geom)
        mu = extract_mu(sample, geom)
        _, b = solver.solve(solver.condense_patch(a))
        diff = b.entries - combine_local(db, mu)
        et = indicator_ET(compute_SB(a, db, mu))
        KT, KU = energy_matrices(a, geom.layout)
        v, w = rng.standard_normal(4), rng.standard_normal(KU.shape[0])
        lhs = abs(v @ diff @ w)
        rhs = 2 * et * np.sqrt(v @ KT @ v) * np.sqrt(w @ KU @ w)
        if lhs > rhs * (1 + 1e-9) + 1e-13:
            violations += 1
        elif rhs > 0:
            worst_ratio = max(worst_ratio, lhs / rhs)
    cfg.p_grid = [0.01, 0.05, 0.1, 0.15]
    cfg.m_samp = 500
    rows = run_indicator_study(cfg, db)
    ratios = [r["rmsET"] / r["rmsAbsL2"] for r in rows]
    ok = max(exact) == 0.0 and violations == 0 and all(0.2 <= q <= 5 for q in ratios)
    detail = (
        f"E_T(A_i, e_i)={max(exact)}; bound violations {violations}/200 (max lhs/rhs {worst_ratio:.3f}); "
        f"RMS E_T / RMS absL2 = {[round(q, 2) for q in ratios]}"
    )
    record(5, ok, detail, {"rows": rows, "ratios": ratios, "element": center_element(mesh)})
    assert max(exact) == 0.0
    assert violations == 0
    assert all(0.2 <= q <= 5 for q in ratios), ratios


def test_criterion_6_oracles():
    mesh = build_mesh(2, 4, 2, 4)
    t = Torus(2, 4, 2)
    model = checkerboard(2, 0.1, 1.0, 0.4)
    sample = sample_defects(model, mesh.n_cells, 8)
    a = realize(model, sample, mesh)
    Ic = t.interpolation()
    err = {}
    # local stiffness and Galerkin orthogonality
    solver = patch_solver(patch(mesh, 0, 1).layout, build_interpolation(mesh))
    ls, gal = 0.0, 0.0
    for T in range(mesh.n_coarse):
        geom = patch(mesh, T, 1)
        corr, b = solver.solve(solver.condense_patch(a[geom.fine_elements]))
        C, K, KT, P, B = correctors(t, a, Ic, T, 1)
        corners = mesh.coarse_element_nodes[T]
        oracle = (P.T @ (KT @ P[:, corners] - K @ C[:, corners])).T
        full = np.zeros((4, mesh.n_coarse))
        np.add.at(full, (slice(None), geom.coarse_nodes), b.entries)
        ls = max(ls, np.abs(full - oracle).max())
        glob = np.zeros((mesh.n_fine, 4))
        glob[geom.fine_nodes] = corr.values
        gal = max(gal, np.abs(B.T @ (K @ glob - KT @ P[:, corners])).max())
    err["local stiffness"], err["Galerkin residual"] = ls, gal
    # coarse PG-LOD matrix
    Ko, _ = pglod_matrix(t, a, 1)
    err["coarse matrix"] = abs(pglod_solve(a, mesh, 1).stiffness.toarray() - Ko).max()
    # S matrix on the reference patch
    db = build_offline(model, mesh, 1)
    geom = patch(mesh, 0, 1)
    mu = extract_mu(sample, geom)
    SB = compute_SB(realize(model, sample, geom), db, mu)
    coeffs = []
    for i in range(len(mu)):
        c = a.copy()
        c[geom.fine_elements] = db.coefficients[i]
        coeffs.append(c)
    S, _ = _oracle_S(t, a, coeffs, mu, 0, 1, Ic)
    err["S matrix"] = np.abs(SB.S - S).max()
    # I_H idempotence
    I, Pr = build_interpolation(mesh), prolongation(mesh)
    v = np.random.default_rng(0).standard_normal(mesh.n_fine)
    err["I_H idempotence"] = np.abs(I(Pr @ I(v)) - I(v)).max()
    orders = np.concatenate([fem_order(1), fem_order(2)])
    ok = (
        max(err["local stiffness"], err["Galerkin residual"], err["coarse matrix"], err["S matrix"]) < 1e-10
        and err["I_H idempotence"] < 1e-12
        and np.all(np.abs(orders - 2) <= 0.1)
    )
    detail = ", ".join(f"{k} {v:.1e}" for k, v in err.items()) + f", FEM orders {np.round(orders, 3).tolist()}"
    record(6, ok, detail, {"errors": err, "orders": orders.tolist()})
    assert ok, detail


@pytest.mark.timing
def test_criterion_7_timing():
    if os.environ.get("DEFECTLOD_TIMING") != "1":
        record(7, None, "skipped (set DEFECTLOD_TIMING=1); committed run in results/timing/", write=False)
        pytest.skip("timing criterion is opt-in: DEFECTLOD_TIMING=1")
    cfg = CampaignConfig(alpha=0.1, beta=1.0, d=2, nH=32, refinement=8, nEps=128, m=4, p_grid=[0.1], seed=5).validate()
    rep = run_timing(cfg)
    comb_ok = rep.t_comb < rep.t_stiff / 10
    online_ok = rep.t_online_per_sample < rep.t_naive_per_sample / 10
    detail = (
        f"tComb/tStiff={rep.t_comb / rep.t_stiff:.2e}, online/naive={rep.t_online_per_sample / rep.t_naive_per_sample:.3f}"
    )
    record(7, comb_ok and online_ok, detail, rep.__dict__)
    assert comb_ok and online_ok, detail
