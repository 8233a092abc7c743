import json

import numpy as np
import pytest

from maxplus_hjb import cli
from maxplus_hjb.benchmarks import ExperimentConfig


def write_config(tmp_path, **overrides):
    cfg = dict(mode_set="singleton", rho=0.0, n_inner=60, n_states=8,
               n_increments=50, seed=3, slice_points=5, slice_span=10.0,
               payoff_eps=0.3)
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestCheckPoly:
    def test_monotone_case_returns_zero(self, capsys):
        rc = cli.main(["check-poly", "--sigma", "[[2],[2]]", "--h", "0.01"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "c_k" in out and "minimum sampled one-step weight" in out
        assert "k = 2" in out

    def test_nonmonotone_case_returns_three(self, capsys):
        # k = 0 with abar = 8 violates the order condition badly
        rc = cli.main(["check-poly", "--sigma", "[[2],[2]]", "--k", "0"])
        assert rc == 3

    def test_zero_column_returns_two(self, capsys):
        rc = cli.main(["check-poly", "--sigma", "[[0],[0]]", "--k", "0"])
        assert rc == 2


class TestCheckFd:
    def test_1d_and_2d_output(self, capsys):
        rc = cli.main(["check-fd", "--a11", "2.5", "--k", "0",
                       "--A", "[[1.5,0.2],[0.2,1.4]]"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "1D stencil" in out and "2D 9-point stencil" in out
        assert "consistent=True" in out

    def test_violating_cfl_returns_three(self):
        rc = cli.main(["check-fd", "--a11", "3.5", "--k", "0"])
        assert rc == 3

    def test_missing_arguments_return_two(self):
        rc = cli.main(["check-fd"])
        assert rc == 2


class TestSolveOracleCompare:
    def test_end_to_end(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        out_prefix = str(tmp_path / "run")
        assert cli.main(["solve", "--config", str(cfg_path),
                         "--out", out_prefix]) == 0
        assert (tmp_path / "run.csv").exists()
        assert (tmp_path / "run_summary.json").exists()
        assert (tmp_path / "run_value.json").exists()

        oracle_path = str(tmp_path / "oracle.json")
        assert cli.main(["oracle", "--config", str(cfg_path),
                         "--out", oracle_path]) == 0
        doc = json.loads((tmp_path / "oracle.json").read_text())
        assert len(doc["slices"][0]["value"]) == 5

        cmp_path = str(tmp_path / "cmp.json")
        rc = cli.main(["compare", "--run", out_prefix, "--oracle", oracle_path,
                       "--out", cmp_path])
        result = json.loads((tmp_path / "cmp.json").read_text())
        assert set(result) >= {"max_gap", "threshold", "pass"}
        assert rc == (0 if result["pass"] else 3)

    def test_bad_config_returns_two(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"nonsense_key": 1}))
        assert cli.main(["solve", "--config", str(path),
                         "--out", str(tmp_path / "x")]) == 2

    def test_oracle_requires_singleton(self, tmp_path):
        cfg_path = write_config(tmp_path, mode_set="uncertain", rho=0.4)
        assert cli.main(["oracle", "--config", str(cfg_path),
                         "--out", str(tmp_path / "o.json")]) == 2


class TestEntryPoint:
    def test_console_script_installed(self):
        import importlib.metadata as md
        eps = md.entry_points()
        if hasattr(eps, "select"):
            matches = list(eps.select(group="console_scripts",
                                      name="maxplus-hjb"))
            assert matches
