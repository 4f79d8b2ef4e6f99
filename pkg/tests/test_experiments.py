import csv
import json

import numpy as np
import pytest

from defectlod.experiments import (
    CampaignConfig,
    load_config,
    main,
    run_deterministic_baseline,
    run_indicator_study,
    run_mc,
    run_oned,
)
from defectlod.mesh import ConfigurationError

SMALL = dict(d=2, nH=4, refinement=2, nEps=4, m=1, m_samp=4, seed=3)


def test_p0_gives_zero_errors():
    cfg = CampaignConfig(p_grid=[0.0], **SMALL).validate()
    row = run_mc(cfg)[0]
    assert row["rmsRelL2"] < 1e-10 and row["rmsRelH1"] < 1e-10
    row = run_deterministic_baseline(cfg)[0]
    assert row["rmsRelL2"] < 1e-10


def test_indicator_p0():
    cfg = CampaignConfig(p_grid=[0.0], **SMALL).validate()
    row = run_indicator_study(cfg)[0]
    assert row["rmsET"] == 0.0 and row["rmsAbsL2"] < 1e-12


def test_threads_do_not_change_results():
    cfg = CampaignConfig(p_grid=[0.3], **SMALL).validate()
    assert run_mc(cfg, threads=1) == run_mc(cfg, threads=3)


def test_baseline_worse_than_offline_online():
    cfg = CampaignConfig(p_grid=[0.2], **{**SMALL, "m_samp": 6}).validate()
    assert run_mc(cfg)[0]["rmsRelL2"] < run_deterministic_baseline(cfg)[0]["rmsRelL2"]


def test_oned_rows():
    cfg = CampaignConfig(d=1, nEps=64, nH_list=[4, 8], p_grid=[0.0, 0.2], m_samp=10, alpha=0.1, beta=1.0)
    rows = run_oned(cfg.validate())
    assert len(rows) == 4
    assert all(r["violations"] == 0 for r in rows)
    assert rows[0]["rmsHarmError"] == 0.0


def test_config_validation(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"nH": 4, "refinement": 2, "nEps": 4, "colour": "red"}))
    with pytest.raises(ConfigurationError, match="colour"):
        load_config(path)
    with pytest.raises(ConfigurationError):
        CampaignConfig(m_samp=0).validate()
    with pytest.raises(ConfigurationError):
        CampaignConfig(nH=4, refinement=2, nEps=6).validate()
    with pytest.raises(ConfigurationError):
        CampaignConfig(model="checkerboard", variant="fill").validate()


def test_config_hash_stable():
    assert CampaignConfig(**SMALL).hash() == CampaignConfig(**SMALL).hash()
    assert CampaignConfig(**SMALL).hash() != CampaignConfig(**{**SMALL, "seed": 4}).hash()


def test_cli_round_trip(tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({**SMALL, "p_grid": [0.2]}))
    out = tmp_path / "out"
    assert main(["offline", "--config", str(cfg), "--out", str(out)]) == 0
    db = out / "offline.lodb"
    assert db.exists()
    assert main(["solve", "--config", str(cfg), "--db", str(db), "--out", str(out), "--fine", "--format", "raw"]) == 0
    u = np.fromfile(out / "coarse.f64", dtype="<f8")
    side = json.loads((out / "coarse.json").read_text())
    assert u.size == 16 and side["shape"] == [4, 4]
    assert np.fromfile(out / "upscaled.f64", dtype="<f8").size == 64
    assert main(["mc", "--config", str(cfg), "--out", str(out), "--seed", "9"]) == 0
    rows = list(csv.DictReader((out / "mc.csv").open()))
    assert rows[0]["seed"] == "9" and float(rows[0]["rmsRelL2"]) >= 0
    manifest = json.loads((out / "mc_manifest.json").read_text())
    assert manifest["config"]["seed"] == 9 and "numpy" in manifest["versions"]
    assert main(["indicator", "--config", str(cfg), "--out", str(out), "--per-element", "--db", str(db)]) == 0
    rows = list(csv.DictReader((out / "indicator_elements.csv").open()))
    assert len(rows) == 16
