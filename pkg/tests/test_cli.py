import csv
import json

import numpy as np
import pytest
import yaml

from hexsim import cli
from hexsim.config import DEFAULTS, ConfigError, config_hash, load_config, parse_assignment
from hexsim.metrology import count_maxima, maxima_positions

TINY = ["optics.camera_px=16", "optics.z_planes=12"]


def run(out, command, *overrides, seed=None, config=None):
    argv = [command, "--out", str(out)]
    if config:
        argv += ["--config", str(config)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    for o in (*TINY, *overrides):
        argv += ["--set", o]
    return cli.main(argv)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults_resolve():
    cfg = load_config()
    assert set(cfg) == {"seed", "phantom", "optics", "illumination", "recon", "net", "train", "noise",
                        "metrology", "paths"}
    assert cfg == load_config()
    assert cfg["optics"]["camera_px"] == 256 and len(cfg["noise"]["levels"]) == 9


def test_all_violations_reported(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"optics": {"camera_pix": 3, "NA": "high"}, "extra": 1,
                                   "train": {"lr0": -1.0}}))
    with pytest.raises(ConfigError) as info:
        load_config(bad)
    probs = info.value.problems
    assert any("optics.camera_pix" in p for p in probs)
    assert any("optics.NA" in p for p in probs)
    assert any("'extra'" in p for p in probs)


def test_semantic_violations_reported_together():
    with pytest.raises(ConfigError) as info:
        load_config(overrides=["recon.wiener_w=0", "illumination.beta=1.5", "phantom.kind=cube",
                               "noise.levels=[8, x]", "phantom.box_nm=[1, 2]"])
    assert len(info.value.problems) == 5


def test_overrides_and_seed():
    assert parse_assignment("optics.camera_px=32") == {"optics": {"camera_px": 32}}
    cfg = load_config(overrides=["optics.camera_px=32"], seed=9)
    assert cfg["optics"]["camera_px"] == 32 and cfg["seed"] == 9
    assert config_hash(cfg) != config_hash(load_config())
    with pytest.raises(ConfigError):
        parse_assignment("no_equals_sign")


def test_config_error_exit_line(tmp_path, capsys):
    code = cli.main(["phantom", "--out", str(tmp_path), "--set", "optics.nope=1", "--set", "net.chunk=0"])
    assert code == 2
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert line.startswith("error: ")
    payload = json.loads(line[len("error: "):])
    assert payload["kind"] == "config" and len(payload["problems"]) == 2


def test_missing_input_exit_line(tmp_path, capsys):
    assert run(tmp_path, "simulate") == 3
    payload = json.loads(capsys.readouterr().err.strip()[len("error: "):])
    assert payload["kind"] == "input" and "phantom.csv" in payload["message"]


def test_provenance_record(tmp_path):
    assert run(tmp_path, "phantom", "phantom.n_steps=20", seed=5) == 0
    rec = json.loads((tmp_path / "provenance_phantom.json").read_text())
    assert rec["seed"] == 5 and rec["command"] == "phantom"
    assert rec["config_hash"] == config_hash(rec["config"])
    assert {"python", "numpy", "scipy", "torch"} <= set(rec["versions"])


def test_two_point_profiles(tmp_path):
    for cmd in ("phantom", "simulate", "metrics"):
        assert run(tmp_path, cmd, "phantom.kind=two_point", "optics.z_planes=20") == 0
    z = {}
    for method in ("widefield", "hr"):
        rows = read_csv(tmp_path / f"profile_{method}.csv")
        z[method] = (np.array([float(r["z_nm"]) for r in rows]), np.array([float(r["mean_intensity"]) for r in rows]))
    assert count_maxima(z["widefield"][1]) == 1
    zh, ph = z["hr"]
    assert count_maxima(ph) == 2
    sep = np.diff(zh[maxima_positions(ph)])[0]
    assert abs(sep - 900.0) <= zh[1] - zh[0]
    rows = {r["method"]: r for r in read_csv(tmp_path / "metrics.csv")}
    assert float(rows["hr"]["contrast"]) > float(rows["widefield"]["contrast"])


def test_report_self_comparison(tmp_path):
    for cmd in ("phantom", "simulate", "metrics", "report"):
        assert run(tmp_path, cmd, "phantom.n_steps=100") == 0
    rows = {r["method"]: r for r in read_csv(tmp_path / "report.csv")}
    assert float(rows["hr"]["mse"]) == 0.0 and float(rows["hr"]["ssim"]) == 1.0
    assert list(read_csv(tmp_path / "metrics.csv")[0]) == cli.METRIC_COLUMNS


def test_noise_sweep_nine_rows_per_method(tmp_path):
    for cmd in ("phantom", "noise_sweep"):
        assert run(tmp_path, cmd, "phantom.n_steps=100") == 0
    rows = read_csv(tmp_path / "noise_sweep.csv")
    assert len(rows) == 9 and {r["method"] for r in rows} == {"sim"}
    assert [float(r["photons"]) for r in rows] == DEFAULTS["noise"]["levels"]


def test_yaml_config_file(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"seed": 11, "phantom": {"kind": "sphere", "n_points": 50, "radius_nm": 500.0}}))
    assert run(tmp_path, "phantom", config=cfg) == 0
    assert len(read_csv(tmp_path / "phantom.csv")) == 50
    assert json.loads((tmp_path / "provenance_phantom.json").read_text())["seed"] == 11
