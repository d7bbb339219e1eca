import json
import subprocess
import sys

import numpy as np
import pytest

from msrecon import cli
from msrecon.metrics import measure
from msrecon.pipeline import (ConfigError, PipelineConfig, PipelineError, hash_run_dir,
                              load_config, make_simulation_pair, run_pipeline)
from msrecon.synthetic import render_gray, sphere_pack
from msrecon.volume import BinaryVolume, load_volume, save_volume

from oracles import random_volume

SMALL = {"dims": [64, 32, 32], "radius": [3.0, 5.0]}


def small_config(out, **kw):
    base = dict(out_dir=str(out), synthetic=dict(PipelineConfig().synthetic, **SMALL),
                cut=32, factor=4, max_lag=6)
    base.update(kw)
    return PipelineConfig(**base)


# ---------------------------------------------------------- simulation pair

def test_pair_scales_and_shapes():
    src = BinaryVolume(np.zeros((256, 256, 256), np.uint8), 2.35)
    pair = make_simulation_pair(src, 64, 4, seed=0)
    assert pair.hr.dims == (64, 64, 64) and pair.hr.scale == 2.35
    assert pair.lr.dims == (16, 16, 16) and pair.lr.scale == pytest.approx(9.4)


def _overlap(a, b, cut):
    return all(a[i] < b[i] + cut[i] and b[i] < a[i] + cut[i] for i in range(3))


def test_pair_cuts_disjoint_over_seeds():
    src = BinaryVolume(np.zeros((40, 30, 20), np.uint8), 1.0)
    for seed in range(100):
        p = make_simulation_pair(src, (16, 12, 8), 4, seed)
        assert not _overlap(p.hr_origin, p.lr_origin, p.cut)
        for o in (p.hr_origin, p.lr_origin):
            assert all(0 <= o[i] and o[i] + p.cut[i] <= src.dims[i] for i in range(3))


def test_pair_gray_uses_otsu():
    b = sphere_pack((48, 24, 24), radius=(3, 5), seed=1)
    g = render_gray(b, seed=1)
    p = make_simulation_pair(g, 24, 4, seed=2)
    assert isinstance(p.hr, BinaryVolume) and isinstance(p.lr, BinaryVolume)
    o = p.hr_origin
    np.testing.assert_array_equal(p.hr.data, b.data[o[0]:o[0] + 24, o[1]:o[1] + 24, o[2]:o[2] + 24])


def test_pair_errors():
    src = BinaryVolume(np.zeros((20, 20, 20), np.uint8), 1.0)
    with pytest.raises(ValueError, match="too small"):
        make_simulation_pair(src, 24, 4)
    with pytest.raises(ValueError, match="disjoint"):
        make_simulation_pair(src, 12, 4)
    with pytest.raises(ValueError, match="divisible"):
        make_simulation_pair(src, 10, 4)


# ----------------------------------------------------------------- config

def test_config_toml_and_json(tmp_path):
    (tmp_path / "c.toml").write_text(
        'seed = 5\nrepeats = 2\ncut = 32\n[synthetic]\ndims = [64, 32, 32]\n'
        '[reconstruction]\ntie_break = "first"\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.seed == 5 and cfg.repeats == 2 and cfg.reconstruction.tie_break == "first"
    assert cfg.synthetic["porosity"] == 0.35
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("text,msg", [
    ("bogus = 1\n", "unknown config keys"),
    ("repeats = 0\n", "repeats"),
    ('[reconstruction]\ntie_break = "coin"\n', "tie_break"),
    ('mode = "real"\n', "real mode"),
    ("hr_scale = -1.0\n", "positive"),
    ("seed = [\n", "cannot parse"),
])
def test_config_errors(tmp_path, text, msg):
    (tmp_path / "c.toml").write_text(text)
    with pytest.raises(ConfigError, match=msg):
        load_config(tmp_path / "c.toml")


# --------------------------------------------------------------- pipeline

@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_pipeline(small_config(out, baseline=True, repeats=2))


def test_run_directory_contents(small_run):
    root = small_run
    man = json.loads((root / "manifest.json").read_text())
    assert man["status"] == "complete"
    listed = {e["path"] for e in man["files"]}
    for rel in ["config.json", "plan.json", "dicts/epd_level1.bin", "dicts/epd_level2.bin",
                "dicts/mpd.bin", "volumes/hr.raw", "volumes/lri.raw", "comparison.csv",
                "report.json", "metrics/hr.json", "metrics/lri.json"]:
        assert rel in listed
    for rep in range(2):
        for branch in ("multi", "single"):
            for f in ("pms1.raw", "pms2.raw", "ms.raw"):
                assert f"runs/rep{rep}/{branch}/{f}" in listed
            assert f"metrics/rep{rep}_{branch}_ms.json" in listed
            assert f"metrics/rep{rep}_{branch}_pms.json" in listed
    for e in man["files"]:
        assert (root / e["path"]).is_file()
    report = json.loads((root / "report.json").read_text())
    assert [r["seed"] for r in report["runs"]] == [0, 0, 1, 1]
    assert report["runs"][1]["branch"] == "single"
    assert all(len(r["stages"]) == 2 for r in report["runs"])
    assert "exact_match_rate" in report["runs"][0]["stages"][0]
    assert "skipped" in report["runs"][0]["padding"]
    assert "timings.json" not in listed and (root / "timings.json").is_file()
    csv = (root / "comparison.csv").read_text()
    assert "rep0_single_ms" in csv and "lri" in csv


def test_ms_porosity_not_below_pms(small_run):
    report = json.loads((small_run / "report.json").read_text())
    for r in report["runs"]:
        assert r["porosity"]["ms"] >= r["porosity"]["pms"]


def test_rerun_from_emitted_config(small_run, tmp_path):
    cfg = PipelineConfig.from_dict(json.loads((small_run / "config.json").read_text()))
    cfg = PipelineConfig.from_dict(dict(cfg.to_dict(), out_dir=str(tmp_path / "again")))
    again = run_pipeline(cfg)
    assert hash_run_dir(again) == hash_run_dir(small_run)


def test_failed_run_writes_partial_manifest(tmp_path):
    cfg = small_config(tmp_path / "bad", mode="real", hr=str(tmp_path / "nope.raw"),
                       lr=str(tmp_path / "nope.raw"))
    with pytest.raises(PipelineError):
        run_pipeline(cfg)
    man = json.loads((tmp_path / "bad" / "manifest.json").read_text())
    assert man["status"] == "failed" and "sidecar not found" in man["error"]


def test_real_mode(tmp_path):
    hr = sphere_pack((32, 32, 32), radius=(3, 5), seed=4)
    lr = random_volume(np.random.default_rng(0), (8, 8, 8), p=0.35, scale=4.0)
    save_volume(hr, tmp_path / "hr.raw")
    save_volume(lr, tmp_path / "lr.raw")
    cfg = PipelineConfig(mode="real", hr=str(tmp_path / "hr.raw"), lr=str(tmp_path / "lr.raw"),
                         out_dir=str(tmp_path / "out"), max_lag=6)
    root = run_pipeline(cfg)
    ms = load_volume(root / "runs/rep0/multi/ms.raw")
    assert ms.dims == (29, 29, 29) and ms.scale == 1.0


# --------------------------------------------------------------------- CLI

def test_cli_plan(capsys):
    rc = cli.main(["plan", "--lr-scale", "9.4", "--hr-scale", "2.35", "--hr-size", "256",
                   "--lr-size", "64"])
    out = capsys.readouterr().out
    assert rc == 0 and "n_max=2" in out and "m_max=2" in out


def test_cli_plan_error(capsys):
    rc = cli.main(["plan", "--lr-scale", "2", "--hr-scale", "2", "--hr-size", "64",
                   "--lr-size", "64"])
    assert rc == cli.EXIT_PLAN
    assert "nothing to reconstruct" in capsys.readouterr().err


def test_cli_missing_config(capsys):
    rc = cli.main(["pipeline", "--config", "missing.toml"])
    assert rc != 0
    assert "config not found" in capsys.readouterr().err


def test_cli_usage_error(capsys):
    assert cli.main(["plan", "--lr-scale", "x"]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE


def test_cli_metrics_equals_library(tmp_path, capsys):
    v = random_volume(np.random.default_rng(1), (12, 12, 12), p=0.3, scale=2.0)
    save_volume(v, tmp_path / "fix.raw")
    assert cli.main(["metrics", "--volume", str(tmp_path / "fix.raw"), "--max-lag", "5",
                     "--out", str(tmp_path / "m.json")]) == 0
    lib = measure(load_volume(tmp_path / "fix.raw"), 5, name="fix")
    assert (tmp_path / "m.json").read_text() == lib.to_json()


def test_cli_stepwise_matches_pipeline_pieces(tmp_path, capsys):
    d = tmp_path
    assert cli.main(["simulate-pair", "--synthetic-dims", "64", "32", "32", "--cut", "32",
                     "--factor", "4", "--seed", "3", "--out", str(d / "pair")]) == 0
    assert cli.main(["build-dicts", "--hr", str(d / "pair/hr.raw"), "--lr",
                     str(d / "pair/lri.raw"), "--out", str(d / "dicts")]) == 0
    assert cli.main(["reconstruct", "--lr", str(d / "pair/lri.raw"), "--dicts", str(d / "dicts"),
                     "--out", str(d / "pms.raw"), "--seed", "3"]) == 0
    assert cli.main(["pad", "--pms", str(d / "pms.raw"), "--dicts", str(d / "dicts"),
                     "--out", str(d / "ms.raw"), "--seed", "3"]) == 0
    lri = load_volume(d / "pair/lri.raw")
    pms = load_volume(d / "pms.raw")
    ms = load_volume(d / "ms.raw")
    np.testing.assert_array_equal(pms.data[::4, ::4, ::4], lri.data)
    assert (d / "pms_stage1.raw").is_file()
    assert ms.porosity() >= pms.porosity()
    assert cli.main(["reconstruct", "--lr", str(d / "pair/lri.raw"), "--dicts",
                     str(d / "nowhere"), "--out", str(d / "x.raw")]) == cli.EXIT_INPUT


def test_cli_pipeline_overrides(tmp_path):
    cfg = small_config(tmp_path / "ignored")
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    rc = cli.main(["pipeline", "--config", str(tmp_path / "c.json"), "--seed", "2",
                   "--out", str(tmp_path / "o")])
    assert rc == 0
    assert json.loads((tmp_path / "o/config.json").read_text())["seed"] == 2


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "msrecon.cli", "plan", "--lr-scale", "13.29",
                        "--hr-scale", "2.35", "--lr-size", "300", "--hr-size", "300"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "out_scale_um=3.3225" in r.stdout
