import csv
import hashlib
import json

import numpy as np
import pytest

from mfsmp import cli, examples


def run(tmp_path, command, config=None, name="out", extra=()):
    out = tmp_path / name
    argv = [command, "--out", str(out), *extra]
    if config is not None:
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(config))
        argv += ["--config", str(path)]
    return cli.main(argv), out


def read_json(path):
    return json.loads(path.read_text())


def table_rows(out):
    with open(out / "riccati_table.csv") as fh:
        return list(csv.reader(fh))


def test_riccati_table_first_published_row(tmp_path):
    code, out = run(tmp_path, "riccati-table", {"table": {"a": [0], "b": [1], "alpha": [0.3, 0.1], "m0": [0]}})
    assert code == 0
    rows = table_rows(out)
    assert rows[0] == ["a", "b", "alpha", "m0", "exit_time"]
    assert float(rows[1][4]) == pytest.approx(5.145, abs=0.01)
    assert rows[2][4] == "inf"


def test_riccati_table_empty_range_is_header_only(tmp_path):
    code, out = run(tmp_path, "riccati-table", {"table": {"a": [], "b": [1], "alpha": [0.3], "m0": [0]}})
    assert code == 0
    assert (out / "riccati_table.csv").read_text() == "a,b,alpha,m0,exit_time\n"


def test_riccati_table_default_covers_published_rows(tmp_path):
    code, out = run(tmp_path, "riccati-table")
    assert code == 0
    assert len(table_rows(out)) == 1 + len(examples.published_table_rows())


@pytest.mark.parametrize("config", [{"bogus": 1}, {"alpha": -1.0}, {"problem": "nope"}, {"n_paths": 0}, [1, 2]])
def test_malformed_config_exits_2(tmp_path, config):
    code, _ = run(tmp_path, "validate", config)
    assert code == 2


def test_unreadable_config_exits_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert cli.main(["validate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_validate_ex1_defaults_pass(tmp_path):
    code, out = run(tmp_path, "validate", {"problem": "ex1", "seed": 42, "n_paths": 100_000})
    rep = read_json(out / "validate.json")
    assert code == 0 and rep["pass"]
    assert set(rep["checks"]) == {"measure_change", "representation", "quadratic_variation", "dynkin",
                                  "cost_estimators", "stationarity"}


def test_validate_perturbed_control_exits_1(tmp_path):
    code, out = run(tmp_path, "validate", {"problem": "ex1", "perturb": 0.5, "n_paths": 20_000})
    rep = read_json(out / "validate.json")
    assert code == 1
    assert not rep["checks"]["stationarity"]["pass"]


def test_manifest_lists_every_artifact(tmp_path):
    code, out = run(tmp_path, "simulate", {"problem": "ex1", "n_paths": 500, "control": "closed_form"})
    assert code == 0
    man = read_json(out / "manifest.json")
    listed = {e["path"] for e in man["artifacts"]}
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert listed == on_disk
    for e in man["artifacts"]:
        assert hashlib.sha256((out / e["path"]).read_bytes()).hexdigest() == e["sha256"]


def test_simulate_path_csv_starts_at_zero(tmp_path):
    _, out = run(tmp_path, "simulate", {"problem": "ex1", "n_paths": 10, "control": "closed_form"})
    assert (out / "path_0.csv").read_text().splitlines()[:2] == ["time,state", "0.0,0"]


def test_seed_flag_overrides_config(tmp_path):
    cfg = {"problem": "ex1", "n_paths": 300, "control": "closed_form", "seed": 1}
    _, a = run(tmp_path, "simulate", cfg, "a", ("--seed", "7"))
    _, b = run(tmp_path, "simulate", {**cfg, "seed": 7}, "b")
    assert (a / "paths.csv").read_bytes() == (b / "paths.csv").read_bytes()
    assert cli.main(["simulate", "--seed", "-1", "--out", str(tmp_path / "c")]) == 2


def test_artifacts_identical_across_runs_and_threads(tmp_path, monkeypatch):
    cfg = {"problem": "ex2", "alpha": 0.3, "n_paths": 5000, "control": "closed_form", "cells": 64}
    hashes = []
    for k, threads in enumerate(("1", "1", "4")):
        monkeypatch.setenv("SOLVER_THREADS", threads)
        for cmd in ("simulate", "cost"):
            code, out = run(tmp_path, cmd, cfg, f"{cmd}{k}")
            assert code == 0
        hashes.append([read_json(tmp_path / f"{c}{k}" / "manifest.json") for c in ("simulate", "cost")])
    assert hashes[0] == hashes[1] == hashes[2]


def test_cost_command_reports_both_estimators(tmp_path):
    code, out = run(tmp_path, "cost", {"problem": "ex1", "control": "constant", "u_const": 1.0,
                                       "n_paths": 20_000})
    rep = read_json(out / "cost.json")
    assert code == 0 and rep["pass"]
    assert abs(rep["reweighted"]["value"] - rep["ode_value"]) <= 3 * rep["reweighted"]["se"]


def test_solve_ex1_matches_closed_form_control(tmp_path):
    """Module example: the solved control equals h(x-) - h(a) within 1e-6."""
    code, out = run(tmp_path, "solve", {"problem": "ex1"})
    rep = read_json(out / "control.json")
    assert code == 0 and rep["converged"]
    assert rep["closed_form_max_delta"] <= 1e-6


def test_solve_ex2_mean_matches_riccati(tmp_path):
    code, out = run(tmp_path, "solve", {"problem": "ex2", "alpha": 0.3, "m0": 0.0, "horizon": 1.0})
    rep = read_json(out / "control.json")
    assert code == 0
    assert rep["riccati_mean_max_delta"] <= 0.02
    lines = (out / "mean.csv").read_text().splitlines()
    assert lines[0] == "t,mu" and len(lines) == 1 + 257


def test_solve_schlogl_equals_indicator_control(tmp_path):
    """Module example: the solved control is 1 - I_0 exactly."""
    code, out = run(tmp_path, "solve", {"problem": "schlogl"})
    assert code == 0
    with open(out / "control.csv") as fh:
        rows = list(csv.DictReader(fh))
    u = np.array([float(r["u"]) for r in rows])
    x = np.array([int(r["state"]) for r in rows])
    np.testing.assert_array_equal(u, np.where(x == 0, 0.0, 1.0))


def test_solve_non_convergence_exits_1_with_artifacts(tmp_path):
    code, out = run(tmp_path, "solve", {"problem": "ex1", "max_rounds": 1, "smp_tol": 1e-14})
    assert code == 1
    rep = read_json(out / "control.json")
    assert not rep["converged"]
    assert (out / "adjoint.csv").exists() and (out / "manifest.json").exists()
