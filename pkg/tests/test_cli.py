import json
import os

import numpy as np
import pytest

from smoothfeedback import cli

BASE = {
    "seed": 3,
    "problem": {"kind": "example8", "alpha": 0.0, "beta": 1.0},
    "lyapunov": {"delta": 1.0},
    "surrogate_grid": {"lower": [-4.5, -4.5], "upper": [4.5, 4.5], "points": [121, 121]},
    "certify": {"T": 0.5, "eps": [0.2], "lambdas": [0.2], "p": [2], "n_starts": 40, "jacobian_samples": 500,
                "suite": ["linfty", "lp"]},
    "simulate": {"starts": [[1.0, 2.0], [-0.5, 0.3]], "horizon": 1.0},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return str(p)


def _run(tmp_path, cmd, cfg, out="out", extra=()):
    o = str(tmp_path / out)
    return cli.main([cmd, "--config", _write(tmp_path, cfg), "--out", o, *extra]), o


def _tree(root):
    out = {}
    for dp, _, fs in os.walk(root):
        for f in fs:
            p = os.path.join(dp, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_parser_lists_all_subcommands():
    p = cli.build_parser()
    for name in cli.SUBCOMMANDS:
        args = p.parse_args([name, "--config", "c", "--out", "o", "--seed", "1", "--jobs", "2"])
        assert args.command == name and args.seed == 1 and args.jobs == 2


def test_simulate_outputs_and_config_echo(tmp_path):
    code, o = _run(tmp_path, "simulate", BASE)
    assert code == cli.EXIT_OK
    assert open(os.path.join(o, "config.json")).read() == json.dumps(BASE, indent=2)
    lines = open(os.path.join(o, "summary.csv")).read().splitlines()
    assert lines[0].startswith("# quantity:") and len(lines) == 4
    row = dict(zip(lines[1].split(","), lines[2].split(",")))
    assert abs(float(row["dpp_defect"])) < 1e-8


def test_certify_passes_with_exit_zero(tmp_path):
    code, o = _run(tmp_path, "certify", BASE)
    assert code == cli.EXIT_OK
    certs = json.load(open(os.path.join(o, "certificates.json")))
    assert certs and all(c["verdict"] for c in certs)


def test_certify_failure_exit_code(tmp_path):
    cfg = json.loads(json.dumps(BASE))
    cfg["certify"]["suite"] = ["linfty", "corrupted"]
    cfg["certify"]["T"] = 3.0
    code, o = _run(tmp_path, "certify", cfg)
    assert code == cli.EXIT_CERT_FAIL
    certs = {c["name"]: c for c in json.load(open(os.path.join(o, "certificates.json")))}
    assert not certs["linfty_corrupted"]["verdict"]


@pytest.mark.parametrize("patch, field", [
    ({"problem": {"kind": "example8", "alpha": 0.0, "beta": -1.0}}, "problem.beta"),
    ({"lyapunov": {"delta": 0.0}}, "lyapunov.delta"),
    ({"problem": {"kind": "nope"}}, "problem.kind"),
    ({"certify": {"suite": ["bogus"]}}, "certify.suite"),
    ({"seed": -4}, "seed"),
])
def test_validation_names_field(tmp_path, capsys, patch, field):
    cfg = {**BASE, **patch}
    code, _ = _run(tmp_path, "certify", cfg)
    assert code == cli.EXIT_INVALID
    err = capsys.readouterr().err
    assert f"'{field}'" in err


def test_malformed_json_and_missing_file(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"seed": 1,,}')
    assert cli.main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == cli.EXIT_INVALID
    assert "'config'" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == \
        cli.EXIT_INVALID


def test_validation_message_has_line(tmp_path, capsys):
    _run(tmp_path, "simulate", {**BASE, "lyapunov": {"delta": -2.0}})
    err = capsys.readouterr().err
    assert "cfg.json:" in err and "'lyapunov.delta'" in err


@pytest.mark.parametrize("cmd, cfg", [
    ("simulate", BASE),
    ("certify", BASE),
    ("synthesize", {**BASE, "synthesize": {"pipeline": "semiconcave", "params": [0.4, 0.2], "n_eval": 20}}),
    ("nondiff-map", {**BASE, "problem": {"kind": "example8", "alpha": 50.0},
                     "nondiff_map": {"points": [[-5.0, 0.0], [0.5, 0.5]]}}),
])
def test_byte_identical_reruns(tmp_path, cmd, cfg):
    c1, o1 = _run(tmp_path, cmd, cfg, out="a")
    c2, o2 = _run(tmp_path, cmd, cfg, out="b")
    assert c1 == c2
    assert _tree(o1) == _tree(o2)


def test_seed_flag_overrides_config(tmp_path):
    cfg = {**BASE, "simulate": {"starts": [], "n_random": 2, "horizon": 0.5}}
    _, a = _run(tmp_path, "simulate", cfg, out="a", extra=("--seed", "7"))
    _, b = _run(tmp_path, "simulate", cfg, out="b", extra=("--seed", "8"))
    assert json.load(open(os.path.join(a, "run.json")))["seed"] == 7
    assert _tree(a)["summary.csv"] != _tree(b)["summary.csv"]


def test_nondiff_map_flags_tie(tmp_path):
    cfg = {**BASE, "problem": {"kind": "example8", "alpha": 50.0},
           "nondiff_map": {"points": [[-5.0, 0.0], [0.5, 0.5]]}}
    code, o = _run(tmp_path, "nondiff-map", cfg)
    assert code == 0
    rows = open(os.path.join(o, "nondiff_map.csv")).read().splitlines()[2:]
    flags = [r.split(",")[-1] for r in rows]
    assert flags == ["1", "0"]


def test_nondiff_map_alpha_trend(tmp_path):
    cfg = {**BASE, "problem": {"kind": "example8", "alpha": 10.0},
           "nondiff_map": {"points": [[0.5, 0.5]], "trend_alphas": [0.0, 10.0]}}
    code, o = _run(tmp_path, "nondiff-map", cfg)
    assert code == 0
    lines = open(os.path.join(o, "alpha_trend.csv")).read().splitlines()
    assert lines[1].startswith("alpha,J") and len(lines) == 4
    bad = {**cfg, "nondiff_map": {"trend_alphas": [-1.0]}}
    assert _run(tmp_path, "nondiff-map", bad, out="bad")[0] == 2


def test_value_grid_and_report(tmp_path):
    cfg = {**BASE, "problem": {"kind": "example8", "alpha": 0.0},
           "grid": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "points": [3, 3], "multistart": "all"}}
    code, o = _run(tmp_path, "value-grid", cfg, out="vg")
    assert code == 0
    meta = json.load(open(os.path.join(o, "value_grid_meta.json")))
    assert meta["nodes"] == 9 and meta["unconverged"] == 0
    assert 0 < meta["difference_quotients"]["max_quotient"] <= np.sqrt(2.0)
    from smoothfeedback.core import ScalarField

    f = ScalarField.load(os.path.join(o, "value_grid.bin"))
    X = f.grid.nodes()
    assert np.max(np.abs(f.values.ravel() - 0.5 * np.sum(X * X, axis=1))) < 1e-8
    _, oc = _run(tmp_path, "certify", BASE, out="cert")
    code, orep = _run(tmp_path, "report", {"report": {"inputs": [o, oc]}}, out="rep")
    assert code == 0
    rep = json.load(open(os.path.join(orep, "report.json")))
    assert rep["certificates"] == rep["passed"] > 0


def test_value_from_file(tmp_path):
    cfg = {**BASE, "problem": {"kind": "example8", "alpha": 0.0},
           "grid": {"lower": [-5.0, -5.0], "upper": [5.0, 5.0], "points": [5, 5], "multistart": "all"}}
    _run(tmp_path, "value-grid", cfg, out="vg")
    f = {**BASE, "value": {"source": "file", "path": str(tmp_path / "vg" / "value_grid.bin")},
         "surrogate_grid": {"lower": [-4.5, -4.5], "upper": [4.5, 4.5], "points": [11, 11]}}
    code, o = _run(tmp_path, "simulate", f, out="sim")
    assert code == 0
    missing = {**BASE, "value": {"source": "file", "path": str(tmp_path / "nope.bin")}}
    code, _ = _run(tmp_path, "simulate", missing, out="x")
    assert code == cli.EXIT_INVALID


def test_linear_quadratic_problem(tmp_path):
    cfg = {"seed": 0, "problem": {"kind": "linear_quadratic", "A": [[0.0, 1.0], [0.0, 0.0]], "B": [[0.0], [1.0]],
                                  "Q": [[1.0, 0.0], [0.0, 1.0]], "beta": 1.0},
           "simulate": {"starts": [[1.0, 0.0]], "horizon": 2.0}}
    code, o = _run(tmp_path, "simulate", cfg)
    assert code == 0
    lines = open(os.path.join(o, "summary.csv")).read().splitlines()
    row = dict(zip(lines[1].split(","), lines[2].split(",")))
    assert abs(float(row["dpp_defect"])) < 1e-8
