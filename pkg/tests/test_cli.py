import json

import numpy as np
import pytest

from planarion import equilibrium as eq
from planarion.cli import main, validate_config


@pytest.fixture
def iso_spec(tmp_path):
    path = tmp_path / "iso.json"
    path.write_text(json.dumps({"omega_x_hz": 3e6, "omega_y_hz": 1e6, "omega_z_hz": 1e6}))
    return path


@pytest.fixture
def paper_spec(tmp_path):
    path = tmp_path / "paper.json"
    path.write_text(json.dumps({"omega_x_hz": 2200e3, "omega_y_hz": 680e3, "omega_z_hz": 343e3}))
    return path


def test_aspect(capsys):
    assert main(["aspect", "--xi-inv", "0.499"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "zeta 0.399"


def test_trapcalc(capsys, paper_spec):
    assert main(["trapcalc", "--spec", str(paper_spec), "--qmax", "0.1", "--n", "91"]) == 0
    out = capsys.readouterr().out
    assert "Omega_min = 2pi x 46.56 MHz" in out
    assert "planar" in out


def test_anneal_two_ions(tmp_path, capsys, iso_spec):
    out = tmp_path / "cfg.csv"
    assert main(["anneal", "--n", "2", "--spec", str(iso_spec), "--seed", "1", "--out", str(out)]) == 0
    cfg = eq.load_configuration(out)
    d = np.linalg.norm(cfg.positions[1] - cfg.positions[0])
    assert d == pytest.approx(2 ** (1 / 3), rel=1e-9)
    manifest = json.loads((tmp_path / "cfg.manifest.json").read_text())
    assert manifest["command"] == "anneal" and manifest["seed"] == 1
    assert set(manifest) >= {"argv", "inputs", "outputs", "parameters", "version", "duration_s"}


def test_anneal_json_format(tmp_path, iso_spec):
    out = tmp_path / "cfg.json"
    assert main(["anneal", "--n", "3", "--spec", str(iso_spec), "--format", "json", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["positions"]) == 3


def test_replay_is_bytewise(tmp_path, iso_spec):
    out = tmp_path / "run" / "cfg.csv"
    assert main(["anneal", "--n", "5", "--spec", str(iso_spec), "--seed", "4", "--runs", "3",
                 "--sweeps", "200", "--out", str(out)]) == 0
    manifest = out.parent / "cfg.manifest.json"
    rec = json.loads(manifest.read_text())
    before = {p: open(p, "rb").read() for p in rec["outputs"]}
    assert len(before) >= 3
    for p in before:
        open(p, "wb").close()
    assert main(["replay", str(manifest)]) == 0
    for p, data in before.items():
        assert open(p, "rb").read() == data


def test_threads_from_environment(tmp_path, iso_spec, monkeypatch):
    monkeypatch.setenv("PLANARION_THREADS", "2")
    out = tmp_path / "cfg.csv"
    assert main(["anneal", "--n", "3", "--spec", str(iso_spec), "--runs", "2", "--sweeps", "100",
                 "--out", str(out)]) == 0
    rec = json.loads((tmp_path / "cfg.manifest.json").read_text())
    assert rec["parameters"]["threads"] == 2
    assert main(["anneal", "--n", "3", "--spec", str(iso_spec), "--runs", "2", "--sweeps", "100",
                 "--threads", "1", "--out", str(out)]) == 0
    rec = json.loads((tmp_path / "cfg.manifest.json").read_text())
    assert rec["parameters"]["threads"] == 1


def test_unknown_flag_is_usage_error(capsys):
    assert main(["aspect", "--xi-inv", "0.5", "--confg", "c.csv"]) == 2
    assert "did you mean --config" in capsys.readouterr().err
    assert main(["aspcet"]) == 2
    assert "did you mean 'aspect'" in capsys.readouterr().err


def test_domain_error_exit_code(capsys):
    assert main(["aspect", "--xi-inv", "1.5"]) == 1
    assert "ValueError" in capsys.readouterr().err


def test_failed_run_leaves_no_outputs(tmp_path):
    out = tmp_path / "v.csv"
    assert main(["volts", "--target", "Ey=100", "--compliance", "1e-9", "--out", str(out)]) == 1
    assert list(tmp_path.iterdir()) == []


def test_volts(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["volts", "--target", "Ey=100", "--format", "json", "--write-basis", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["voltages"]) == 12
    assert (tmp_path / "v_basis.csv").exists()
    assert main(["volts", "--target", "Ey"]) == 2


def test_validate_good_spec(paper_spec, capsys):
    assert validate_config(paper_spec) == []
    assert main(["validate", str(paper_spec)]) == 0


def test_validate_negative_frequency(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"omega_x_hz": 2e6, "omega_y_hz": -7e5, "omega_z_hz": 3e5}))
    assert main(["validate", str(path)]) == 1
    assert "omega_y_hz" in capsys.readouterr().out


def test_validate_duplicate_ion(tmp_path):
    path = tmp_path / "cfg.csv"
    path.write_text("ion,x,y,z\n0,0,0,1\n1,0,0,-1\n1,0,1,0\n")
    problems = validate_config(path)
    assert len(problems) == 1
    assert "row 4" in problems[0] and "duplicate" in problems[0]


def test_validate_unreadable(tmp_path):
    assert main(["validate", str(tmp_path / "missing.json")]) == 1


def test_no_command_prints_help(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().out


def test_modes_and_fitpot(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"omega_x_hz": 2120e3, "omega_y_hz": 720e3, "omega_z_hz": 370e3}))
    cfg = tmp_path / "c8.csv"
    assert main(["anneal", "--n", "8", "--spec", str(spec), "--seed", "1", "--out", str(cfg)]) == 0
    assert main(["modes", "--config", str(cfg), "--spec", str(spec), "--out", str(tmp_path / "m.csv")]) == 0
    assert "out_of_plane_hz" in capsys.readouterr().out
    assert (tmp_path / "m_sidebands.svg").exists()
    c = eq.load_configuration(cfg)
    pos = tmp_path / "p.csv"
    pos.write_text("ion,y_um,z_um\n" + "".join(f"{i},{y!r},{z!r}\n" for i, (y, z) in
                                                enumerate(c.positions[:, 1:].tolist())))
    assert main(["fitpot", "--positions", str(pos), "--out", str(tmp_path / "f.json"), "--format", "json"]) == 0
    assert "xi_inv 0.5139" in capsys.readouterr().out
