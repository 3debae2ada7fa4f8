import json
import subprocess
import sys
from pathlib import Path

import pytest

from ostnav import cli
from ostnav import scenario as sc

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(f'name = "tiny"\nduration_orbits = 0.01\nkeypoints = "{CONFIGS / "keypoints.json"}"\n'
                 "[ost]\nenabled = true\nwarmup_epochs = 2\nperiod = 3\n")
    return p


def test_run_writes_log(tiny, tmp_path, capsys):
    out = tmp_path / "logs"
    assert cli.main(["run", str(tiny), "--seed", "4", "--ost", "off", "--out", str(out), "--gnuplot"]) == 0
    csv = out / "tiny_seed4_ostoff.csv"
    assert csv.exists() and csv.with_suffix(".json").exists() and csv.with_suffix(".gp").exists()
    meta = json.loads(csv.with_suffix(".json").read_text())
    assert meta["seed"] == 4 and meta["ost"] is False and meta["status"] == "ok"
    assert f"log: {csv}" in capsys.readouterr().out


def test_run_honors_log_dir_env(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv(sc.LOG_DIR_ENV, str(tmp_path / "env"))
    assert cli.main(["run", str(tiny)]) == 0
    assert (tmp_path / "env" / "tiny_seed0_oston.csv").exists()


def test_compare_tables(tiny, tmp_path, capsys):
    out = tmp_path / "logs"
    for ost in ("on", "off"):
        cli.main(["run", str(tiny), "--ost", ost, "--out", str(out)])
    capsys.readouterr()
    table = tmp_path / "cmp.csv"
    assert cli.main(["compare", *map(str, sorted(out.glob("*.csv"))), "--csv", str(table)]) == 0
    text = capsys.readouterr().out
    assert "e_q_ss_mean" in text
    assert len(table.read_text().splitlines()) == 3
    assert (tmp_path / "cmp_runs.csv").exists()


def test_sweep(tiny, tmp_path):
    out = tmp_path / "sw"
    assert cli.main(["sweep", str(tiny), "--severities", "0,1", "--seeds", "0", "--duration", "0.005",
                     "--out", str(out)]) == 0
    rows = (out / "tiny_sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('trajectory = "roe9"\n')
    assert cli.main(["run", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG == 3
    assert "config error" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.toml")]) == 3


def test_divergence_exit_code(tiny, tmp_path, monkeypatch):
    def diverged(cfg, progress=None):
        return sc.RunLog([], {}, dict(name=cfg.name, seed=cfg.seed, ost=False, status="diverged"))

    monkeypatch.setattr(sc, "run", diverged)
    assert cli.main(["run", str(tiny), "--out", str(tmp_path)]) == cli.EXIT_DIVERGED == 2


def test_bad_argument_list():
    with pytest.raises(SystemExit):
        cli.main(["sweep", "x.toml", "--seeds", "a,b"])


def test_module_entry_point(tiny, tmp_path):
    r = subprocess.run([sys.executable, "-m", "ostnav", "run", str(tiny), "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "e_q_ss" in r.stdout


def test_real_divergence_exit_code(tmp_path):
    p = tmp_path / "bad_guess.toml"
    p.write_text(f'name = "bad"\nduration_orbits = 0.01\nkeypoints = "{CONFIGS / "keypoints.json"}"\n'
                 "[filter]\nw_guess_dps = [60.0, 0.0, 0.0]\n")
    assert cli.main(["run", str(p), "--out", str(tmp_path)]) == 2
    meta = json.loads((tmp_path / "bad_seed0_oston.json").read_text())
    assert meta["status"] == "diverged"
