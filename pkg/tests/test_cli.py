import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from skewtvb import __version__
from skewtvb.cli import ConfigError, config_digest, config_from_dict, main, parse_config


def run(tmp_path, *argv):
    return main([*argv, "--threads", "1"])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- configuration -------------------------------------------------------------


def test_minimal_config_fills_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"experiment": "positioning-1d", "seed": 1}))
    cfg = parse_config(p)
    assert cfg.K == 100 and cfg.n_mc == 1000
    assert list(cfg.algorithms) == ["stvbf", "tvbf", "kf-g", "kf"]


def test_negative_q_names_the_key():
    with pytest.raises(ConfigError, match="q"):
        config_from_dict({"experiment": "pseudorange", "q": -1.0})


def test_unknown_algorithm_lists_valid_names():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"experiment": "pseudorange", "algorithms": ["ukf"]})
    assert "stvbf" in str(exc.value) and "rtss-g" in str(exc.value)


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"experiment": "pseudorange", "sed": 3})
    assert "'sed'" in str(exc.value) and "seed" in str(exc.value)


@pytest.mark.parametrize("raw", [{"experiment": "pseudorange", "K": 2.5}, {"experiment": "pseudorange", "n_mc": True}])
def test_wrong_types_rejected(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_missing_experiment_key():
    with pytest.raises(ConfigError, match="experiment"):
        config_from_dict({"seed": 1})


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{seed: 1")
    with pytest.raises(ConfigError, match="JSON"):
        parse_config(p)


def test_config_errors_exit_nonzero_with_message(tmp_path, capsys):
    rc = main(["pseudorange", "--q", "-3", "--out", str(tmp_path / "x.csv")])
    assert rc == 2
    assert "q" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_config_experiment_must_match_command(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"experiment": "convergence"}))
    assert main(["pseudorange", "--config", str(p)]) == 2
    assert "experiment" in capsys.readouterr().err


def test_digest_tracks_config():
    a = config_from_dict({"experiment": "pseudorange", "seed": 1})
    b = config_from_dict({"experiment": "pseudorange", "seed": 1, "q": 10.0})
    c = config_from_dict({"experiment": "pseudorange", "seed": 2})
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest(c)


# -- runs ----------------------------------------------------------------------


@pytest.mark.invariant
def test_positioning_1d_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(tmp_path, "positioning-1d", "--seed", "7", "--n-mc", "5", "--out", str(a)) == 0
    assert run(tmp_path, "positioning-1d", "--seed", "7", "--n-mc", "5", "--out", str(b)) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = read_csv(a)
    assert [r["algorithm"] for r in rows] == ["stvbf", "tvbf", "kf-g", "kf"]
    assert list(rows[0]) == ["algorithm", "rmse", "mean", "std", "skewness"]


@pytest.mark.invariant
def test_worker_count_does_not_change_output(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    argv = ["pseudorange", "--seed", "3", "--n-mc", "4", "--algorithms", "stvbf,kf"]
    assert main([*argv, "--out", str(a), "--threads", "1"]) == 0
    assert main([*argv, "--out", str(b), "--threads", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_pseudorange_one_row_per_algorithm_and_replication(tmp_path):
    out = tmp_path / "p.csv"
    assert run(tmp_path, "pseudorange", "--n-mc", "3", "--algorithms", "stvbf,tvbf,kf", "--out", str(out)) == 0
    rows = read_csv(out)
    assert len(rows) == 9
    assert {(r["algorithm"], int(r["replication"])) for r in rows} == {
        (a, i) for a in ("stvbf", "tvbf", "kf") for i in range(3)
    }


@pytest.mark.invariant
def test_convergence_axes(tmp_path):
    out = tmp_path / "c.csv"
    argv = ["convergence", "--n-mc", "1", "--iters", "1,2", "--particles", "20,40", "--out", str(out)]
    assert run(tmp_path, *argv) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["algorithm", "delta", "setting", "mean_rmse", "median_rmse", "wall_time_s"]
    got = {(r["algorithm"], float(r["delta"]), int(r["setting"])) for r in rows}
    want = {("stvbf", d, n) for d in (2.0, 5.0) for n in (1, 2)}
    want |= {("pf", d, n) for d in (2.0, 5.0) for n in (20, 40)}
    want |= {("tvbf", d, 10) for d in (2.0, 5.0)}
    assert got == want


def test_particles_must_be_single_outside_convergence(tmp_path, capsys):
    assert run(tmp_path, "pseudorange", "--particles", "10,20", "--out", str(tmp_path / "x.csv")) == 2
    assert "particles" in capsys.readouterr().err


def test_empirical_noise_with_histogram(tmp_path):
    h = tmp_path / "h.csv"
    h.write_text("bin_left,bin_right,count\n-1,0,3\n0,1,5\n1,8,2\n")
    out = tmp_path / "e.csv"
    assert run(tmp_path, "empirical-noise", "--n-mc", "3", "--histogram", str(h), "--out", str(out)) == 0
    rows = read_csv(out)
    assert len(rows) == 3
    for r in rows:
        d = 100 * (float(r["rmse_tvbf"]) - float(r["rmse_stvbf"])) / float(r["rmse_stvbf"])
        assert float(r["difference_percent"]) == pytest.approx(d, rel=1e-12)
    man = json.loads((tmp_path / "e.csv.manifest.json").read_text())
    assert str(h) in man["inputs"] and len(man["inputs"][str(h)]) == 64


def test_empirical_noise_default_histogram(tmp_path):
    out = tmp_path / "e.csv"
    assert run(tmp_path, "empirical-noise", "--n-mc", "2", "--out", str(out)) == 0
    assert len(read_csv(out)) == 2


def test_simulate_columns(tmp_path):
    out = tmp_path / "s.csv"
    assert run(tmp_path, "simulate", "--K", "4", "--out", str(out)) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["k", "x1", "y1", "y2", "y3"]
    assert [int(r["k"]) for r in rows] == [1, 2, 3, 4]


def test_manifest_contents(tmp_path):
    out = tmp_path / "r.csv"
    assert run(tmp_path, "positioning-1d", "--seed", "4", "--n-mc", "2", "--out", str(out)) == 0
    man = json.loads((tmp_path / "r.csv.manifest.json").read_text())
    assert man["seed"] == 4 and man["tool_version"] == __version__
    assert man["outputs"] == [str(out)]
    assert man["config"]["n_mc"] == 2 and man["config"]["K"] == 100
    assert man["config_digest"] == config_digest(config_from_dict(man["config"]))
    assert man["wall_time_s"]["positioning-1d"] >= 0


@pytest.mark.invariant
def test_manifest_config_reproduces_output(tmp_path):
    out = tmp_path / "r.csv"
    assert run(tmp_path, "pseudorange", "--seed", "9", "--n-mc", "2", "--algorithms", "stvbf,kf-g", "--out", str(out)) == 0
    man = json.loads((tmp_path / "r.csv.manifest.json").read_text())
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(man["config"]))
    again = tmp_path / "again.csv"
    assert run(tmp_path, "pseudorange", "--config", str(cfg), "--out", str(again)) == 0
    assert out.read_bytes() == again.read_bytes()


def test_json_format(tmp_path):
    out = tmp_path / "r.json"
    argv = ["pseudorange", "--n-mc", "2", "--algorithms", "stvbf,tvbf", "--format", "json", "--out", str(out)]
    assert run(tmp_path, *argv) == 0
    doc = json.loads(out.read_text())
    assert doc["columns"] == ["algorithm", "replication", "rmse"]
    assert len(doc["rows"]) == 4
    assert set(doc["summary"]["difference_percent_quantiles"]) == {"tvbf"}


def test_csv_floats_round_trip(tmp_path):
    out = tmp_path / "r.json"
    csv_out = tmp_path / "r.csv"
    argv = ["pseudorange", "--n-mc", "2", "--algorithms", "stvbf"]
    assert run(tmp_path, *argv, "--format", "json", "--out", str(out)) == 0
    assert run(tmp_path, *argv, "--out", str(csv_out)) == 0
    a = [r[2] for r in json.loads(out.read_text())["rows"]]
    b = [float(r["rmse"]) for r in read_csv(csv_out)]
    assert np.array_equal(a, b)


def test_unwritable_output_reports_path(tmp_path, capsys):
    out = tmp_path / "missing" / "r.csv"
    assert run(tmp_path, "positioning-1d", "--n-mc", "1", "--out", str(out)) != 0
    assert str(out) in capsys.readouterr().err


def test_missing_histogram_reports_path(tmp_path, capsys):
    h = tmp_path / "nope.csv"
    assert run(tmp_path, "empirical-noise", "--n-mc", "1", "--histogram", str(h), "--out", str(tmp_path / "e.csv")) != 0
    assert "nope.csv" in capsys.readouterr().err


def test_console_script_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "skewtvb.cli", "--version"], capture_output=True, text=True, check=True
    )
    assert __version__ in res.stdout
