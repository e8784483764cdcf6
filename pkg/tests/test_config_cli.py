import csv
import filecmp
import json
import os

import numpy as np
import pytest

from sandqvi import cli
from sandqvi.config import ExperimentConfig, parse_config
from sandqvi.errors import ConfigError
from sandqvi.optimality import CONDITION_IDS

SMALL = {
    "grid": {"nx": 5, "ny": 5},
    "time": {"T": 0.5, "M": 4},
    "source": {"kind": "point", "location": [0.5, 0.5], "rate": 0.02},
    "control": {"region": [0.0, 0.4, 0.0, 0.4], "max_iter": 5, "gamma": 10.0},
    "sweep": {"trials": 5},
}


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def run_cli(tmp_path, command, data=SMALL, out="out", extra=()):
    cfg = write_config(tmp_path, data)
    outdir = str(tmp_path / out)
    return cli.main([command, "--config", cfg, "--out", outdir, *extra]), outdir


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config({})
        assert isinstance(cfg, ExperimentConfig)
        assert (cfg.grid.nx, cfg.material.alpha, cfg.time.M, cfg.seed) == (9, 1.0, 20, 0)

    def test_json_text_and_path(self, tmp_path):
        text = json.dumps(SMALL)
        assert parse_config(text) == parse_config(write_config(tmp_path, SMALL))

    def test_inf_norm(self):
        assert parse_config({"material": {"p": "inf"}}).material.p == np.inf

    @pytest.mark.parametrize(
        "data,path",
        [
            ({"control": {"lambda0": 0.5, "lambda1": 0.1}}, "control.lambda0"),
            ({"control": {"sigma": -1.0}}, "control.sigma"),
            ({"grid": {"nx": 0}}, "grid.nx"),
            ({"solver": {"gamma_schedule": [10.0, 1.0]}}, "solver.gamma_schedule"),
            ({"material": {"p": 1.0}}, "material.p"),
            ({"grid": {"nz": 3}}, "grid.nz"),
            ({"colour": "red"}, "colour"),
            ({"seed": -1}, "seed"),
        ],
    )
    def test_errors_carry_field_path(self, data, path):
        with pytest.raises(ConfigError) as info:
            parse_config(data)
        assert info.value.path == path
        assert str(info.value).startswith(path + ":")

    def test_malformed_json(self):
        with pytest.raises(ConfigError, match="malformed"):
            parse_config("{not json")


class TestCli:
    def test_simulate_without_source_is_constant(self, tmp_path):
        data = dict(SMALL, source={"kind": "uniform", "rate": 0.0})
        status, out = run_cli(tmp_path, "simulate", data)
        assert status == cli.EXIT_OK
        rows = read_rows(os.path.join(out, "trajectory.csv"))
        assert len(rows) == 25 * 5
        assert {float(r["height"]) for r in rows} == {0.0}
        feas = json.load(open(os.path.join(out, "feasibility.json")))
        assert feas["final_violation"] == 0.0

    def test_config_error_exit_code(self, tmp_path):
        status, out = run_cli(tmp_path, "simulate", {"control": {"lambda0": 1.0, "lambda1": 0.0}})
        assert status == cli.EXIT_CONFIG
        assert "control.lambda0" in json.load(open(os.path.join(out, "errors.json")))["message"]

    def test_missing_custom_field_is_config_error(self, tmp_path):
        data = dict(SMALL, support={"kind": "custom", "path": "missing.csv"})
        status, _ = run_cli(tmp_path, "simulate", data)
        assert status == cli.EXIT_CONFIG

    def test_gamma_sweep_nonincreasing(self, tmp_path):
        status, out = run_cli(tmp_path, "gamma-sweep")
        assert status == cli.EXIT_OK
        v = [float(r["max_violation"]) for r in read_rows(os.path.join(out, "violations.csv"))]
        assert len(v) > 1
        assert all(b <= a for a, b in zip(v, v[1:]))

    def test_mosco_rows(self, tmp_path):
        status, out = run_cli(tmp_path, "mosco-test")
        assert status == cli.EXIT_OK
        rows = read_rows(os.path.join(out, "beta.csv"))
        assert len(rows) == 5 * 5
        assert max(float(r["violation"]) for r in rows) == 0.0

    def test_check_reports_every_condition(self, tmp_path):
        status, out = run_cli(tmp_path, "check")
        res = json.load(open(os.path.join(out, "residuals.json")))
        assert set(res["residuals"]) == set(CONDITION_IDS)
        assert status == (cli.EXIT_OK if all(res["passed"].values()) else cli.EXIT_CHECK)

    def test_optimize_roundtrip(self, tmp_path):
        status, out = run_cli(tmp_path, "optimize")
        assert status == cli.EXIT_OK
        report = json.load(open(os.path.join(out, "report.json")))
        hist = report["objective_history"]
        assert all(b <= a for a, b in zip(hist, hist[1:]))
        # restarting from the exported control reproduces its objective
        data = json.loads(json.dumps(SMALL))
        data["control"].update(init_path=os.path.join(out, "y0_final.csv"), max_iter=0)
        status, out2 = run_cli(tmp_path, "optimize", data, out="again")
        again = json.load(open(os.path.join(out2, "report.json")))
        assert abs(again["objective_history"][0] - report["final_objective"]) <= 1e-12

    @pytest.mark.parametrize("command", cli.COMMANDS)
    def test_deterministic(self, tmp_path, command):
        s1, out1 = run_cli(tmp_path, command, out="a")
        s2, out2 = run_cli(tmp_path, command, out="b")
        assert s1 == s2
        names = sorted(os.listdir(out1))
        assert names == sorted(os.listdir(out2))
        match, mismatch, errors = filecmp.cmpfiles(out1, out2, names, shallow=False)
        assert not mismatch and not errors

    def test_seed_override(self, tmp_path):
        _, a = run_cli(tmp_path, "gamma-sweep", out="a", extra=("--seed", "1"))
        _, b = run_cli(tmp_path, "gamma-sweep", out="b", extra=("--seed", "2"))
        assert open(os.path.join(a, "violations.csv")).read() != open(os.path.join(b, "violations.csv")).read()

    def test_unknown_command_rejected(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["explode", "--config", write_config(tmp_path, SMALL), "--out", str(tmp_path)])
