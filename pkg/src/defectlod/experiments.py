"""Monte Carlo campaigns, the indicator study, 1D tables, timing, and the CLI."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .coefficient import (
    DefectSample,
    checkerboard,
    defect_variant,
    extract_mu,
    inclusions,
    realize,
    sample_defects,
)
from .corrector import patch_solver
from .indicator import compute_SB, indicator_ET
from .interpolation import build_interpolation
from .mesh import ConfigurationError, NestedMesh, build_mesh, patch, patch_layout
from .offline import OfflineDatabase, build_offline, forcing, load_database, load_vector, save_database
from .oned import rms, verify_consistency_bound
from .online import assemble_global, solve_coarse, upscale
from .reference import l2_norm, pglod_solve, relative_errors


@dataclass
class CampaignConfig:
    model: str = "checkerboard"  # checkerboard | inclusions
    variant: str | None = None  # value | fill | shift | lshape (inclusions only)
    beta_tilde: float | None = None
    alpha: float = 0.1
    beta: float = 1.0
    d: int = 2
    nH: int = 32
    refinement: int = 8
    nEps: int = 128
    m: int = 4
    p_grid: list = field(default_factory=lambda: [0.1])
    m_samp: int = 50
    seed: int = 0
    outputs: list = field(default_factory=lambda: ["errors"])
    forcing: str = "auto"
    interpolation: str = "averagedL2"
    nH_list: list | None = None  # 1D study: coarse sizes
    repetitions: int = 5  # timing study
    database: str | None = None

    def validate(self):
        if self.m_samp < 1:
            raise ConfigurationError(f"m_samp={self.m_samp} must be at least 1")
        if self.model not in ("checkerboard", "inclusions"):
            raise ConfigurationError(f"unknown model {self.model!r}")
        if self.variant is not None and self.model != "inclusions":
            raise ConfigurationError("defect variants need the inclusions model")
        for p in self.p_grid:
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"probability {p} outside [0, 1]")
        for nH in self.nH_list or [self.nH]:
            build_mesh(self.d, nH, self.refinement if self.nH_list is None else self.nEps // nH, self.nEps)
        return self

    def mesh(self) -> NestedMesh:
        return build_mesh(self.d, self.nH, self.refinement, self.nEps)

    def base_model(self, p: float = 0.0):
        if self.model == "checkerboard":
            model = checkerboard(self.d, self.alpha, self.beta, p)
        else:
            model = inclusions(self.d, self.alpha, self.beta, p)
            if self.variant is not None:
                model = defect_variant(model, self.variant, self.beta_tilde)
        return model

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path) -> CampaignConfig:
    raw = json.loads(Path(path).read_text())
    known = {f.name for f in fields(CampaignConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}; known: {sorted(known)}")
    return CampaignConfig(**raw).validate()


def _map(fn, items, threads: int):
    """Ordered map; results are merged in item order whatever the pool size."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class Context:
    cfg: CampaignConfig
    mesh: NestedMesh
    db: OfflineDatabase

    @classmethod
    def build(cls, cfg: CampaignConfig, db: OfflineDatabase | None = None):
        mesh = cfg.mesh()
        if db is None and cfg.database:
            db = load_database(cfg.database)
        if db is None:
            db = build_offline(cfg.base_model(), mesh, cfg.m, cfg.forcing, cfg.interpolation)
        return cls(cfg, mesh, db)


def sample_errors(ctx: Context, model, seed: int, index: int, baseline=None):
    """Relative errors of one sample against the per-sample PG-LOD reference.

    With ``baseline`` = (u_H, u_ms) the given fixed solution is compared
    instead of the offline-online one.
    """
    mesh = ctx.mesh
    sample = sample_defects(model, mesh.n_cells, seed, index)
    if baseline is None:
        u = solve_coarse(assemble_global(ctx.db, sample), mesh)
        u_ms = upscale(ctx.db, sample, u).fine_values
    else:
        u, u_ms = baseline
    ref = pglod_solve(realize(model, sample, mesh), mesh, ctx.cfg.m, ctx.cfg.forcing, ctx.cfg.interpolation)
    return relative_errors(ref, u, u_ms, mesh)


def _campaign(ctx: Context, threads: int, baseline=None):
    rows = []
    for p in ctx.cfg.p_grid:
        model = ctx.cfg.base_model(p)
        errs = _map(
            lambda s: sample_errors(ctx, model, ctx.cfg.seed, s, baseline), range(ctx.cfg.m_samp), threads
        )
        e = np.array(errs, dtype=float)
        rows.append(
            {
                "p": p,
                "rmsRelL2": rms(e[:, 0]),
                "rmsRelH1": rms(e[:, 1]),
                "mSamp": ctx.cfg.m_samp,
                "seed": ctx.cfg.seed,
            }
        )
    return rows


def run_mc(cfg: CampaignConfig, db=None, threads: int = 1):
    """RMS relative errors of the offline-online solution per p."""
    return _campaign(Context.build(cfg, db), threads)


def deterministic_solution(ctx: Context):
    empty = DefectSample(bits=np.zeros(ctx.mesh.n_cells, dtype=bool), seed=0)
    u = solve_coarse(assemble_global(ctx.db, empty), ctx.mesh)
    return u, upscale(ctx.db, empty, u).fine_values


def run_deterministic_baseline(cfg: CampaignConfig, db=None, threads: int = 1):
    """RMS relative errors of the defect-free LOD solution against sampled references."""
    ctx = Context.build(cfg, db)
    return _campaign(ctx, threads, baseline=deterministic_solution(ctx))


def center_element(mesh: NestedMesh) -> int:
    return int(np.sum((mesh.nH // 2) * mesh.nH ** np.arange(mesh.d)))


def run_indicator_study(cfg: CampaignConfig, db=None, threads: int = 1):
    """Per p: RMS of E_T at the center element and of the solution errors."""
    ctx = Context.build(cfg, db)
    mesh, T = ctx.mesh, center_element(ctx.mesh)
    geom = patch(mesh, T, cfg.m)

    def one(model, s):
        sample = sample_defects(model, mesh.n_cells, cfg.seed, s)
        u = solve_coarse(assemble_global(ctx.db, sample), mesh)
        u_ms = upscale(ctx.db, sample, u).fine_values
        ref = pglod_solve(realize(model, sample, mesh), mesh, cfg.m, cfg.forcing, cfg.interpolation)
        rel_l2, rel_h1 = relative_errors(ref, u, u_ms, mesh)
        # the offline patch is the reference patch translated onto T
        et = indicator_ET(compute_SB(realize(model, sample, geom), ctx.db, extract_mu(sample, geom)))
        return et, l2_norm(ref.coarse - u, mesh), rel_l2, rel_h1, l2_norm(ref.coarse, mesh)

    rows = []
    for p in cfg.p_grid:
        model = cfg.base_model(p)
        v = np.array(_map(lambda s: one(model, s), range(cfg.m_samp), threads))
        rows.append(
            {
                "p": p,
                "rmsET": rms(v[:, 0]),
                "rmsAbsL2": rms(v[:, 1]),
                "rmsRelL2": rms(v[:, 2]),
                "rmsRelH1": rms(v[:, 3]),
                "meanNormL2": float(np.mean(v[:, 4])),
                "element": T,
                "mSamp": cfg.m_samp,
                "seed": cfg.seed,
            }
        )
    return rows


def indicator_per_element(db: OfflineDatabase, model, sample: DefectSample):
    """E_T for every coarse element of one sample."""
    mesh = db.mesh
    out = np.empty(mesh.n_coarse)
    for T in range(mesh.n_coarse):
        geom = patch(mesh, T, db.m)
        out[T] = indicator_ET(compute_SB(realize(model, sample, geom), db, extract_mu(sample, geom)))
    return out


def run_oned(cfg: CampaignConfig, threads: int = 1):
    """Harmonic-mean study in 1D: nodal interpolation, m = 0, one row per (H, p)."""
    rows = []
    for nH in cfg.nH_list or [cfg.nH]:
        mesh = build_mesh(1, nH, cfg.nEps // nH, cfg.nEps)
        load = load_vector(mesh, forcing("sin1d" if cfg.forcing == "auto" else cfg.forcing))
        for p in cfg.p_grid:
            model = checkerboard(1, cfg.alpha, cfg.beta, p)
            rep = verify_consistency_bound(model, mesh, cfg.m_samp, cfg.seed, load=load)
            rows.append(
                {
                    "p": p,
                    "H": mesh.H,
                    "rmsHarmError": rep.rms_harm_error,
                    "rmsRelL2": rep.rms_rel_l2,
                    "violations": len(rep.violations),
                    "maxBoundRatio": rep.max_ratio,
                    "mSamp": cfg.m_samp,
                    "seed": cfg.seed,
                }
            )
    return rows


@dataclass
class TimingReport:
    t_stiff: float
    t_comb: float
    t_offline_total: float
    t_online_per_sample: float
    t_naive_per_sample: float
    n_offline: int
    n_elements: int
    repetitions: int
    break_even_samples: float


def _median_time(fn, reps: int, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts)


def run_timing(cfg: CampaignConfig) -> TimingReport:
    """Wall-clock medians of the offline and online building blocks and of naive PG-LOD."""
    reps = max(cfg.repetitions, 5)
    mesh = cfg.mesh()
    model = cfg.base_model(cfg.p_grid[0])
    t0 = time.perf_counter()
    db = build_offline(cfg.base_model(), mesh, cfg.m, cfg.forcing, cfg.interpolation)
    t_off = time.perf_counter() - t0
    layout = patch_layout(mesh, cfg.m)
    solver = patch_solver(layout, build_interpolation(mesh, cfg.interpolation))
    a0 = db.coefficients[0]
    t_stiff = _median_time(lambda: solver.solve(solver.condense_patch(a0)), reps)
    sample = sample_defects(model, mesh.n_cells, cfg.seed, 0)
    mu = extract_mu(sample, patch(mesh, 0, cfg.m))
    idx = np.flatnonzero(mu)
    stack = db.local_matrices

    def comb():
        np.tensordot(mu[idx], stack[idx], axes=1)

    t_comb = _median_time(comb, max(reps, 50))
    samples = [sample_defects(model, mesh.n_cells, cfg.seed, s) for s in range(reps)]
    it = iter(range(10**9))

    def online():
        s = samples[next(it) % reps]
        solve_coarse(assemble_global(db, s), mesh)

    t_on = _median_time(online, reps)
    a = realize(model, samples[0], mesh)
    t_naive = _median_time(lambda: pglod_solve(a, mesh, cfg.m, cfg.forcing, cfg.interpolation, upscale=False), reps)
    n_el = mesh.n_coarse
    denom = n_el * (t_stiff - t_comb)
    return TimingReport(
        t_stiff=t_stiff,
        t_comb=t_comb,
        t_offline_total=t_off,
        t_online_per_sample=t_on,
        t_naive_per_sample=t_naive,
        n_offline=db.n_offline,
        n_elements=n_el,
        repetitions=reps,
        break_even_samples=(db.n_offline + 1) * t_stiff / denom if denom > 0 else float("inf"),
    )


# ---------------------------------------------------------------- output


def write_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_manifest(out: Path, command: str, cfg: CampaignConfig | None, wall: float, extra=None):
    manifest = {
        "command": command,
        "config": asdict(cfg) if cfg else None,
        "config_sha256": cfg.hash() if cfg else None,
        "versions": {
            "defectlod": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "machine": {"platform": platform.platform(), "processor": platform.processor()},
        "wall_seconds": wall,
    }
    if extra:
        manifest.update(extra)
    (out / f"{command}_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def dump_array(values, path: Path, fmt: str, grid_shape=None):
    """CSV (index, value) or raw little-endian float64 with a JSON sidecar."""
    values = np.asarray(values, dtype=float)
    if fmt == "csv":
        write_csv([{"index": i, "value": float(v)} for i, v in enumerate(values)], path.with_suffix(".csv"))
    else:
        path.with_suffix(".f64").write_bytes(values.astype("<f8").tobytes())
        side = {"dtype": "float64", "byteorder": "little", "shape": list(grid_shape or values.shape),
                "order": "lexicographic, first axis fastest"}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2))


def _config_from_args(args) -> CampaignConfig:
    cfg = load_config(args.config) if args.config else CampaignConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="defectlod", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("offline", "solve", "mc", "baseline", "indicator", "oned", "timing"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON campaign configuration")
        sp.add_argument("--seed", type=int, help="campaign seed (overrides the config)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for sample fan-out")
        if name in ("solve", "indicator"):
            sp.add_argument("--db", help="offline database file")
            sp.add_argument("--index", type=int, default=0, help="sample index")
            sp.add_argument("--p", type=float, help="defect probability (default: first of p_grid)")
        if name == "solve":
            sp.add_argument("--fine", action="store_true", help="also write the upscaled fine field")
            sp.add_argument("--format", choices=("csv", "raw"), default="csv")
        if name == "indicator":
            sp.add_argument("--per-element", action="store_true", help="E_T of every element for one sample")
    args = parser.parse_args(argv)
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    extra = None
    if args.command == "offline":
        db = Context.build(cfg).db
        save_database(db, out / "offline.lodb")
        extra = {"n_offline": db.n_offline}
    elif args.command == "solve":
        db = load_database(args.db) if args.db else Context.build(cfg).db
        p = cfg.p_grid[0] if args.p is None else args.p
        sample = sample_defects(cfg.base_model(p), db.mesh.n_cells, cfg.seed, args.index)
        u = solve_coarse(assemble_global(db, sample), db.mesh)
        dump_array(u, out / "coarse", args.format, (db.mesh.nH,) * db.mesh.d)
        if args.fine:
            dump_array(upscale(db, sample, u).fine_values, out / "upscaled", args.format, (db.mesh.nh,) * db.mesh.d)
    elif args.command == "mc":
        write_csv(run_mc(cfg, threads=args.threads), out / "mc.csv")
    elif args.command == "baseline":
        write_csv(run_deterministic_baseline(cfg, threads=args.threads), out / "baseline.csv")
    elif args.command == "indicator":
        if args.per_element:
            db = load_database(args.db) if args.db else Context.build(cfg).db
            p = cfg.p_grid[0] if args.p is None else args.p
            model = cfg.base_model(p)
            sample = sample_defects(model, db.mesh.n_cells, cfg.seed, args.index)
            et = indicator_per_element(db, model, sample)
            write_csv([{"element": T, "E_T": float(v)} for T, v in enumerate(et)], out / "indicator_elements.csv")
        else:
            write_csv(run_indicator_study(cfg, threads=args.threads), out / "indicator.csv")
    elif args.command == "oned":
        write_csv(run_oned(cfg, threads=args.threads), out / "oned.csv")
    elif args.command == "timing":
        rep = run_timing(cfg)
        write_csv([asdict(rep)], out / "timing.csv")
        extra = {"timing": asdict(rep)}
    write_manifest(out, args.command, cfg, time.perf_counter() - t0, extra)
    return 0


if __name__ == "__main__":
    sys.exit(main())
