import json
import math

import numpy as np
import pytest

from bpca import io as bio
from bpca.cavi import CaviConfig
from bpca.cli import EXIT_CONFIG, EXIT_OK, EXIT_SUITE, main
from bpca.model import Hyper

K1_CFG = {
    "name": "k1",
    "dims": {"n": 100, "d": 10, "k": 1},
    "tau0": 100,
    "lambda_diag": [1],
    "seed": 7,
    "cavi": {"epsilon": 1e-15, "init": {"mu_z": 0.1, "sigma_z": "identity"}},
}
GRID_CFG = {"name": "grid", "dims": {"n": 4, "d": 3, "k": 2}, "tau0": 100, "lambda_diag": [1, 2], "seed": 0}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(tmp_path, command, cfg, out):
    return main([command, "--config", str(write_cfg(tmp_path, cfg, f"{command}.json")), "--out", str(out)])


def strip_metadata(path):
    obj = json.loads(path.read_text())
    obj.pop("metadata", None)
    return obj


@pytest.mark.parametrize("x", [0.1, 1 / 3, math.pi * 1e-300, 1e308, -2.5e-17, 10.039223851012151])
def test_float_roundtrip(x):
    assert json.loads(bio.dumps(x)) == x


def test_dumps_arrays_and_literals():
    text = bio.dumps({"a": np.array([1.0, 2.0]), "b": None, "c": True})
    assert json.loads(text) == {"a": [1.0, 2.0], "b": None, "c": True}
    assert "\n" not in bio.dumps_line({"a": [1, 2]})


def test_matrix_csv_roundtrip(tmp_path, rng):
    x = rng.standard_normal((5, 3))
    bio.write_matrix_csv(tmp_path / "x.csv", x)
    assert "," in (tmp_path / "x.csv").read_text().splitlines()[0]
    np.testing.assert_array_equal(bio.read_matrix_csv(tmp_path / "x.csv").x, x)


def test_missing_matrix_is_config_error(tmp_path):
    with pytest.raises(bio.ConfigError):
        bio.read_matrix_csv(tmp_path / "nope.csv")


@pytest.mark.parametrize(
    "cfg",
    [
        {"dims": {"n": 4, "d": 3, "k": 1}, "tau0": 1, "seed": 0},
        {"name": "x", "dims": {"n": 4, "d": 3, "k": 1}, "tau0": -1, "seed": 0},
        {"name": "x", "dims": {"n": 4, "d": 3, "k": 1}, "tau0": 1},
        {"name": "x", "dims": {"n": 4, "d": 3}, "tau0": 1, "seed": 0},
        {"name": "x", "dims": {"n": 4, "d": 3, "k": 1}, "tau0": 1, "seed": 0, "bogus": 1},
    ],
)
def test_simulate_schema_rejections(tmp_path, cfg):
    with pytest.raises(bio.ConfigError):
        bio.load_config(write_cfg(tmp_path, cfg), "simulate")


def test_cavi_block_parsing():
    hyper = Hyper(4, 3, 2, 1.0)
    cfg = {"cavi": {"epsilon": 1e-9, "max_iters": 7, "init": {"mu_z": "random(3)", "sigma_z": 2.0}}}
    conf = bio.cavi_config_from(cfg, hyper)
    assert isinstance(conf, CaviConfig)
    assert conf.epsilon == 1e-9 and conf.max_iters == 7
    np.testing.assert_array_equal(conf.sigma_z0, 2.0 * np.eye(2))
    again = bio.cavi_config_from(cfg, hyper)
    np.testing.assert_array_equal(conf.mu_z0, again.mu_z0)


def test_cli_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(tmp_path, "simulate", K1_CFG, a) == EXIT_OK
    assert run(tmp_path, "simulate", K1_CFG, b) == EXIT_OK
    assert (a / "X.csv").read_bytes() == (b / "X.csv").read_bytes()
    assert strip_metadata(a / "generative.json") == strip_metadata(b / "generative.json")
    assert bio.read_matrix_csv(a / "X.csv").x.shape == (100, 10)
    side = json.loads((a / "generative.json").read_text())
    assert side["seed"] == 7 and set(side["metadata"]) == {"created", "version"}


def test_cli_rejects_n_below_d(tmp_path, capsys):
    cfg = {"name": "bad", "dims": {"n": 3, "d": 10, "k": 1}, "tau0": 100, "seed": 1}
    assert run(tmp_path, "simulate", cfg, tmp_path / "bad") == EXIT_CONFIG
    assert "n" in capsys.readouterr().err


def test_cli_fit_missing_data(tmp_path):
    assert run(tmp_path, "fit", K1_CFG, tmp_path / "empty") == EXIT_CONFIG


def test_cli_analyze_requires_k1(tmp_path):
    out = tmp_path / "g"
    assert run(tmp_path, "simulate", GRID_CFG, out) == EXIT_OK
    assert run(tmp_path, "analyze-k1", GRID_CFG, out) == EXIT_CONFIG


@pytest.fixture(scope="module")
def k1_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("k1")
    out = tmp / "out"
    for cmd in ("simulate", "fit"):
        assert run(tmp, cmd, K1_CFG, out) == EXIT_OK
    assert run(tmp, "analyze-k1", {**K1_CFG, "horizon": 400}, out) == EXIT_OK
    return tmp, out


def test_cli_fit_outputs(k1_run):
    _, out = k1_run
    records = bio.read_jsonl(out / "trace.jsonl")
    for rec in records:
        bio.validate(rec, "trace_record")
    assert records[0]["t"] == 1 and records[0]["delta_rel"] is None
    fit = json.loads((out / "fit.json").read_text())
    bio.validate(fit, "fit_result")
    assert fit["status"] == "converged" and fit["iterations"] == len(records)


def test_cli_fit_rerun_identical(k1_run, tmp_path):
    tmp, out = k1_run
    again = tmp_path / "again"
    again.mkdir()
    (again / "X.csv").write_bytes((out / "X.csv").read_bytes())
    assert run(tmp_path, "fit", K1_CFG, again) == EXIT_OK
    assert (again / "trace.jsonl").read_bytes() == (out / "trace.jsonl").read_bytes()
    assert strip_metadata(again / "fit.json") == strip_metadata(out / "fit.json")


def test_cli_epsilon_controls_sweeps(k1_run, tmp_path):
    tmp, out = k1_run
    loose = tmp_path / "loose"
    loose.mkdir()
    (loose / "X.csv").write_bytes((out / "X.csv").read_bytes())
    cfg = {**K1_CFG, "cavi": {**K1_CFG["cavi"], "epsilon": 1e-3}}
    assert run(tmp_path, "fit", cfg, loose) == EXIT_OK
    n_loose = json.loads((loose / "fit.json").read_text())["iterations"]
    n_tight = json.loads((out / "fit.json").read_text())["iterations"]
    assert n_tight > n_loose


def test_cli_analyze_outputs(k1_run):
    _, out = k1_run
    fp = json.loads((out / "fixed_points.json").read_text())
    bio.validate(fp, "fixed_points")
    assert fp["status"] == "ok" and max(fp["jacobian_eigs"][0]) < 1
    lines = (out / "figure1_direction.csv").read_text().splitlines()
    assert lines[0] == "t,series,observed,bound"
    for line in lines[1:]:
        t, _, observed, bound = line.split(",")
        assert int(t) >= 2
        assert float(observed) <= max(float(bound), 1e-12)
    lines = (out / "figure2_scaling.csv").read_text().splitlines()
    assert lines[0] == "t,series,abs_error" and len(lines) == 1 + 2 * 400


def test_cli_stationary_and_gcorr(tmp_path):
    out = tmp_path / "grid"
    assert run(tmp_path, "simulate", GRID_CFG, out) == EXIT_OK
    assert run(tmp_path, "stationary", GRID_CFG, out) == EXIT_OK
    rep = json.loads((out / "hessian.json").read_text())
    bio.validate(rep, "hessian")
    assert rep["singular_flag"] is False
    eigs = (out / "hessian_eigs.csv").read_text().splitlines()
    assert eigs[0] == "index,eigval" and len(eigs) == 1 + len(rep["eigvals"])

    iso = {**GRID_CFG, "lambda_diag": [1, 1], "state": str(out / "hessian.json")}
    assert run(tmp_path, "stationary", iso, tmp_path / "iso") == EXIT_CONFIG  # no data there
    iso["data"] = str(out / "X.csv")
    del iso["state"]
    assert run(tmp_path, "stationary", iso, tmp_path / "iso") == EXIT_OK
    assert json.loads((tmp_path / "iso" / "hessian.json").read_text())["singular_flag"] is True

    assert run(tmp_path, "gcorr", GRID_CFG, out) == EXIT_OK
    g = json.loads((out / "gcorr.json").read_text())
    bio.validate(g, "gcorr_report")
    assert all(g[f"term{i}"] > 0 for i in range(1, 5))
    assert g["satisfied"] == (g["max_term"]["value"] < 1)


def test_cli_verify(tmp_path):
    cfg = {"name": "verify", "trials": 50, "seed": 1}
    assert run(tmp_path, "verify", cfg, tmp_path / "v") == EXIT_OK
    res = json.loads((tmp_path / "v" / "verify.json").read_text())
    bio.validate(res, "verify_result")
    assert res["all_passed"]


def test_cli_verify_exit_code_on_failure(tmp_path, monkeypatch):
    import bpca.cli as cli

    monkeypatch.setattr(cli, "property_suites", lambda *a: {"all_passed": False, "suites": {}, "diagnostics": {}})
    assert run(tmp_path, "verify", {"name": "v"}, tmp_path / "v") == EXIT_SUITE


def test_cli_default_out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("BPCA_OUT_ROOT", str(tmp_path / "root"))
    cfg = write_cfg(tmp_path, GRID_CFG)
    assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
    assert (tmp_path / "root" / "grid" / "X.csv").exists()


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_cli_numerical_abort(tmp_path):
    cfg = {"name": "blow", "dims": {"n": 2, "d": 2, "k": 1}, "tau0": 1e300, "seed": 0}
    out = tmp_path / "blow"
    out.mkdir()
    bio.write_matrix_csv(out / "X.csv", np.array([[1e200, 0.0], [0.0, 1e200]]))
    assert run(tmp_path, "fit", cfg, out) == 3
