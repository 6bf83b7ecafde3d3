import json

import numpy as np
import pytest

from slowhomog import cli, config


def _write(tmp_path, data, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_defaults_are_valid():
    assert config.validate(config.load_defaults()) == []


def test_unknown_key_reported(tmp_path):
    _, problems = config.load(_write(tmp_path, {"cell": {"radius": 0.2}}))
    assert problems == ["cell.radius: unknown key"]


def test_unparseable_expression_reports_position():
    cfg = config.load_defaults()
    cfg["macro"]["rho"] = "sin(x1 +* 2)"
    problems = config.validate(cfg)
    assert len(problems) == 1
    assert "macro.rho" in problems[0] and "position 8" in problems[0]


def test_table_range_not_covering_image():
    cfg = config.load_defaults()
    cfg["effective"]["a_values"] = [0.22, 0.24, 0.26, 0.28, 0.3]
    problems = config.validate(cfg)
    assert len(problems) == 1
    assert "table range [0.22, 0.3]" in problems[0] and "a(x) image [0.2" in problems[0]


def test_wrong_variables_rejected():
    cfg = config.load_defaults()
    cfg["effective"]["rho"] = "sin(2*pi*X1)*x1"
    assert any("effective.rho" in p and "not allowed" in p for p in config.validate(cfg))


def test_radius_bound_exit_code(tmp_path, capsys):
    code = cli.main(["cell", "--config", _write(tmp_path, {"cell": {"a": 0.6}}), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "(0, 0.5)" in capsys.readouterr().err


def test_invalid_json_exit_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    assert cli.main(["cell", "--config", str(path)]) == 2


def test_cell_identity_when_contrast_is_one(tmp_path):
    cfg = {"cell": {"eps_i": 1.0, "modes": ["PSI_FINITE"], "target_h": 0.04}}
    out = tmp_path / "o"
    assert cli.main(["cell", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    rows = np.loadtxt(out / "cell_eps.csv", delimiter=",", skiprows=1, usecols=(2, 3, 4, 5), ndmin=2)
    np.testing.assert_allclose(rows, np.tile([1.0, 0.0, 0.0, 1.0], (len(rows), 1)), atol=1e-12)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["exit_status"] == 0
    assert manifest["config_sha256"] == config.config_hash(manifest["config"])
    assert set(manifest["versions"]) >= {"slowhomog", "numpy", "scipy", "python"}
    assert "cell_eps.csv" in manifest["outputs"]
    assert not [p for p in out.iterdir() if p.name.startswith(".")]


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("solver diverged")

    monkeypatch.setitem(cli.RUNNERS, "cell", boom)
    out = tmp_path / "o"
    assert cli.main(["cell", "--config", _write(tmp_path, {}), "--out", str(out)]) == 3
    assert json.loads((out / "manifest.json").read_text())["exit_status"] == 3


def test_deterministic_outputs(tmp_path):
    cfg = _write(tmp_path, {"effective": {"a_values": [0.15, 0.2, 0.25, 0.3, 0.35], "target_h": 0.04}})
    outs = []
    for k, threads in enumerate((1, 3)):
        out = tmp_path / f"o{k}"
        assert cli.main(["eff-table", "--config", cfg, "--out", str(out), "--threads", str(threads)]) == 0
        outs.append((out / "eff_table.csv").read_bytes())
    assert outs[0] == outs[1]


def test_msint_experiment(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["msint", "--config", _write(tmp_path, {}), "--out", str(out)]) == 0
    for name in ("msint_closed.csv", "msint_arc.csv"):
        assert (out / name).read_text().splitlines()[0] == "delta,correct,naive,oracle,res_correct,res_naive"


def test_macro_experiment(tmp_path):
    cfg = {
        "effective": {"a_values": [0.15, 0.2, 0.25, 0.3, 0.35], "target_h": 0.04},
        "macro": {"grid_n": 16},
    }
    out = tmp_path / "o"
    assert cli.main(["macro", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    assert (out / "macro_solution.csv").read_text().splitlines()[0] == "x1,x2,phi0"
    assert (out / "macro_coefficients.csv").exists()


def test_threads_must_be_positive(tmp_path):
    assert cli.main(["cell", "--config", _write(tmp_path, {}), "--threads", "0"]) == 2


def test_unknown_experiment_rejected(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["everything", "--config", _write(tmp_path, {})])
