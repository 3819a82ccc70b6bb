import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from immersion_coding.cli import main
from immersion_coding.scheme import load_scheme, load_target_keys


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def scheme_file(tmp_path):
    out = tmp_path / "s.imk"
    assert run("keygen", "--dims", 2, 2, 1, 4, 4, 2, "--preset", "unit", "--sigma", 1.0,
               "--seed", 3, "--out", out) == 0
    return out


@pytest.fixture
def inputs_csv(tmp_path):
    p = tmp_path / "in.csv"
    rows = np.random.default_rng(0).uniform(-1, 1, (6, 2))
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y_0", "y_1"])
        w.writerows(rows.tolist())
    return p, rows


def test_keygen_writes_scheme_keys_and_report(scheme_file):
    s = load_scheme(scheme_file)
    assert s.dims.nt_y == 4
    assert load_target_keys(scheme_file.with_suffix(".target")).fingerprint() == \
        s.target_keys().fingerprint()
    assert "eps_y max" in scheme_file.with_suffix(".report.txt").read_text()


def test_keygen_is_deterministic(tmp_path):
    digests = []
    for name in ("a.imk", "b.imk"):
        assert run("keygen", "--case", "reactor", "--seed", 5, "--out", tmp_path / name) == 0
        digests.append(hashlib.sha256((tmp_path / name).read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_keygen_calibrates_sigma(tmp_path, capsys):
    out = tmp_path / "c.imk"
    assert run("keygen", "--dims", 1, 1, 1, 3, 3, 2, "--preset", "unit",
               "--eps-target", 0.5, 0.5, "--out", out) == 0
    text = capsys.readouterr().out
    eps = [float(l.split()[1]) for l in text.splitlines() if l.startswith("eps_")]
    assert max(eps) == pytest.approx(0.5, rel=1e-12)


def test_keygen_bad_dims_exit_2(tmp_path):
    assert run("keygen", "--dims", 2, 2, 1, 2, 4, 2, "--out", tmp_path / "x.imk") == 2
    assert run("keygen", "--out", tmp_path / "x.imk") == 2


def test_privacy_report(scheme_file, tmp_path, capsys):
    assert run("privacy-report", "--scheme", scheme_file, "--csv", tmp_path / "r.csv") == 0
    assert "eps_u max" in capsys.readouterr().out
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["channel", "row", "epsilon"] and len(rows) == 1 + 4 + 4


def test_missing_scheme_file_exit_2(tmp_path):
    assert run("privacy-report", "--scheme", tmp_path / "none.imk") == 2


def test_demo_control(tmp_path, capsys):
    assert run("demo-control", "--out", tmp_path / "ctl") == 0
    out = capsys.readouterr().out
    err = float(next(l for l in out.splitlines() if l.startswith("max |u")).split()[-1])
    assert err <= 1e-6
    assert (tmp_path / "ctl" / "trajectory.csv").exists()


def test_demo_control_literal_exit_3(tmp_path, capsys):
    assert run("demo-control", "--literal", "--out", tmp_path / "ctl") == 3
    assert "step" in capsys.readouterr().err


def test_demo_ml(tmp_path, capsys):
    out = tmp_path / "m.csv"
    assert run("demo-ml", "--records", 80, "--epochs", 3, "--lr", 0.1, "--out", out) == 0
    text = capsys.readouterr().out
    assert "per-epoch acc equal   True" in text
    assert len(list(csv.reader(open(out)))) == 4


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"records": 50, "epochs": 2, "arch": "mlp"}))
    assert run("demo-ml", "--config", cfg, "--epochs", 4, "--dump-config") == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["records"] == 50 and resolved["epochs"] == 4 and resolved["arch"] == "mlp"


def test_config_supplies_required(scheme_file, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scheme": str(scheme_file)}))
    assert run("privacy-report", "--config", cfg) == 0


def test_config_unknown_key_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run("demo-ml", "--config", cfg) == 2
    cfg.write_text("[1, 2]")
    assert run("demo-ml", "--config", cfg) == 2


def test_client_loopback_and_replay(scheme_file, inputs_csv, tmp_path, capsys):
    path, rows = inputs_csv
    tr, out = tmp_path / "t.imtr", tmp_path / "u.csv"
    assert run("client", "--scheme", scheme_file, "--inputs", path, "--loopback",
               "--transcript", tr, "--out", out, "--params", '{"n_y": 2}') == 0
    assert "plain bytes in wire   none" in capsys.readouterr().out
    us = np.loadtxt(out, delimiter=",", skiprows=1)[:, 1:]
    assert np.allclose(us, rows, atol=1e-9)
    assert run("replay", "--transcript", tr, "--target-keys",
               scheme_file.with_suffix(".target")) == 0


def test_replay_with_wrong_keys_exit_4(scheme_file, inputs_csv, tmp_path):
    path, _ = inputs_csv
    tr = tmp_path / "t.imtr"
    assert run("client", "--scheme", scheme_file, "--inputs", path, "--loopback",
               "--transcript", tr, "--params", '{"n_y": 2}') == 0
    other = tmp_path / "o.imk"
    assert run("keygen", "--dims", 2, 2, 1, 4, 4, 2, "--seed", 9, "--out", other) == 0
    assert run("replay", "--transcript", tr, "--target-keys", other.with_suffix(".target")) == 4


def test_client_wrong_columns_exit_2(scheme_file, tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("y_0\n1.0\n")
    assert run("client", "--scheme", scheme_file, "--inputs", p, "--loopback") == 2


def test_client_no_server_exit_2(scheme_file, inputs_csv):
    path, _ = inputs_csv
    # Nothing listens on port 1; the connection error is an OSError.
    assert run("client", "--scheme", scheme_file, "--inputs", path, "--port", 1) == 2


def test_serve_and_client_processes(scheme_file, inputs_csv, tmp_path):
    path, rows = inputs_csv
    server = subprocess.Popen(
        [sys.executable, "-m", "immersion_coding.cli", "serve", "--target-keys",
         str(scheme_file.with_suffix(".target")), "--port", "0"],
        stdout=subprocess.PIPE, text=True)
    try:
        line = server.stdout.readline()
        port = int(line.rsplit(":", 1)[1])
        out = tmp_path / "u.csv"
        client = subprocess.run(
            [sys.executable, "-m", "immersion_coding.cli", "client", "--scheme", str(scheme_file),
             "--inputs", str(path), "--port", str(port), "--out", str(out),
             "--params", '{"n_y": 2}'],
            capture_output=True, text=True, timeout=60)
        assert client.returncode == 0, client.stderr
        us = np.loadtxt(out, delimiter=",", skiprows=1)[:, 1:]
        assert np.allclose(us, rows, atol=1e-9)
    finally:
        server.terminate()
        server.wait(timeout=10)
