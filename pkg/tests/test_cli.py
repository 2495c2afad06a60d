import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from klscore.cli import main
from klscore.mc import default_config, simulate_uniform_game
from klscore.numerics import SeededRng


def write_json(path: Path, obj) -> str:
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def runner():
    return CliRunner()


ENTRY_MODEL = {"model": "entry_probit", "params": {"x1_cols": [0], "x2_cols": [1]}}
UNIFORM_MODEL = {"model": "entry_uniform", "params": {}}
D1_THETA = [-0.367, 2.044, -0.285, 0.282, 1.774, -0.426]


def make_uniform_dataset(tmp_path, n=600, seed=3) -> str:
    data = simulate_uniform_game(np.array([-0.2, -0.3]), 0.0, n, SeededRng(seed))
    path = tmp_path / "data.csv"
    data.to_csv(path)
    return str(path)


class TestProjectCommand:
    def test_feasible_point_zero_kl(self, runner, tmp_path):
        # fixed mass (1,1) is 0.06 and the (1,0) bracket is [0.24, 0.8]
        cfg = {
            "model": UNIFORM_MODEL,
            "theta": [-0.2, -0.3],
            "x": [1.0],
            "p0": [0.06, 0.64, 0.30],
            "method": "generic",
        }
        path = write_json(tmp_path / "cfg.json", cfg)
        res = runner.invoke(main, ["project", "--config", path, "--out", str(tmp_path / "o"),
                                   "--overwrite"])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "o" / "projection.json").read_text())
        assert doc["kl"] == pytest.approx(0.0, abs=1e-12)

    def test_region_tag_in_output(self, runner, tmp_path):
        cfg = {
            "model": ENTRY_MODEL,
            "theta": D1_THETA,
            "x": [0.6, 0.3],
            "p0": [0.05, 0.05, 0.85, 0.05],
            "method": "closed_form",
        }
        path = write_json(tmp_path / "cfg.json", cfg)
        res = runner.invoke(main, ["project", "--config", path, "--out", str(tmp_path / "o"),
                                   "--overwrite"])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "o" / "projection.json").read_text())
        assert doc["region"] == "Theta2"

    def test_malformed_json_exit_2(self, runner, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        res = runner.invoke(main, ["project", "--config", str(bad)])
        assert res.exit_code == 2

    def test_numeric_failure_exit_3(self, runner, tmp_path):
        # a degenerate model (pair mass collapses to zero) is a numerical
        # failure, not a config problem
        cfg = {
            "model": {"model": "entry_uniform", "params": {"offset": -1e-13}},
            "theta": [0.0, 0.0],
            "x": [0.0],
            "p0": [0.98, 0.01, 0.01],
            "method": "closed_form",
        }
        path = write_json(tmp_path / "cfg.json", cfg)
        res = runner.invoke(main, ["project", "--config", path, "--out", str(tmp_path / "o"),
                                   "--overwrite"])
        assert res.exit_code == 3


class TestScoreCommand:
    def test_columns_emitted(self, runner, tmp_path):
        cfg = {
            "model": ENTRY_MODEL,
            "theta": D1_THETA,
            "x": [0.6, 0.3],
            "p0": [0.25, 0.3, 0.3, 0.15],
            "method": "closed_form",
        }
        path = write_json(tmp_path / "cfg.json", cfg)
        res = runner.invoke(main, ["score", "--config", path, "--out", str(tmp_path / "o"),
                                   "--overwrite"])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "o" / "score.json").read_text())
        assert set(doc["columns"]) == {"(0,0)", "(0,1)", "(1,0)", "(1,1)"}
        assert len(doc["columns"]["(0,0)"]) == 6


class TestTestCommand:
    def test_outcome_document(self, runner, tmp_path):
        data_csv = make_uniform_dataset(tmp_path)
        cfg = {
            "model": UNIFORM_MODEL,
            "data_csv": data_csv,
            "theta": [-0.2, -0.3],
            "ccp": {"kind": "cell_mean", "clip": 1e-3},
        }
        path = write_json(tmp_path / "cfg.json", cfg)
        res = runner.invoke(main, ["test", "--config", path, "--out", str(tmp_path / "o"),
                                   "--overwrite", "--alpha", "0.05"])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "o" / "test.json").read_text())
        assert doc["df"] == 2
        assert doc["reject"] == (doc["t_n"] > doc["critical"])


class TestCsAndCiCommands:
    def cs_config(self, tmp_path, data_csv):
        return {
            "model": UNIFORM_MODEL,
            "data_csv": data_csv,
            "grid": {"bounds": [[-0.45, 0.0], [-0.45, 0.0]], "counts": [7, 7]},
            "ccp": {"kind": "cell_mean", "clip": 1e-3},
            "alpha": 0.05,
            "epsilon": 0.05,
        }

    def test_cs_csv_and_alpha_nesting(self, runner, tmp_path):
        data_csv = make_uniform_dataset(tmp_path)
        path = write_json(tmp_path / "cfg.json", self.cs_config(tmp_path, data_csv))
        out5 = tmp_path / "a05"
        out10 = tmp_path / "a10"
        r5 = runner.invoke(main, ["cs", "--config", path, "--out", str(out5), "--overwrite"])
        r10 = runner.invoke(main, ["cs", "--config", path, "--out", str(out10), "--overwrite",
                                   "--alpha", "0.10"])
        assert r5.exit_code == 0 and r10.exit_code == 0, (r5.output, r10.output)
        rows5 = (out5 / "cs.csv").read_text().splitlines()[1:]
        rows10 = (out10 / "cs.csv").read_text().splitlines()[1:]
        acc5 = [r.split(",")[3] == "1" for r in rows5]
        acc10 = [r.split(",")[3] == "1" for r in rows10]
        assert all(a5 or not a10 for a5, a10 in zip(acc5, acc10))

    def test_rerun_bitwise_identical(self, runner, tmp_path):
        data_csv = make_uniform_dataset(tmp_path)
        path = write_json(tmp_path / "cfg.json", self.cs_config(tmp_path, data_csv))
        outs = []
        for name, threads in (("r1", "1"), ("r2", "2")):
            out = tmp_path / name
            res = runner.invoke(main, ["cs", "--config", path, "--out", str(out),
                                       "--overwrite", "--seed", "5", "--threads", threads])
            assert res.exit_code == 0, res.output
            outs.append((out / "cs.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_ci_from_cs(self, runner, tmp_path):
        data_csv = make_uniform_dataset(tmp_path)
        path = write_json(tmp_path / "cfg.json", self.cs_config(tmp_path, data_csv))
        out = tmp_path / "cs_out"
        assert runner.invoke(main, ["cs", "--config", path, "--out", str(out),
                                    "--overwrite"]).exit_code == 0
        ci_cfg = {
            "cs_csv": str(out / "cs.csv"),
            "functional": {"type": "coordinate", "index": 0},
        }
        ci_path = write_json(tmp_path / "ci.json", ci_cfg)
        res = runner.invoke(main, ["ci", "--config", ci_path, "--out", str(tmp_path / "ci_out"),
                                   "--overwrite"])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "ci_out" / "ci.json").read_text())
        assert doc["lo"] <= doc["hi"]


class TestPseudotrueCommand:
    def test_population_grid(self, runner, tmp_path):
        from klscore.mc import uniform_dgp_pmf

        theta0 = np.array([-0.2, -0.3])
        cfg = {
            "model": UNIFORM_MODEL,
            "grid": {"bounds": [[-0.45, 0.0], [-0.45, 0.0]], "counts": [12, 12]},
            "population": {
                "x": [[0.0], [1.0]],
                "p0": [uniform_dgp_pmf(theta0, 0.0, 0).tolist(),
                       uniform_dgp_pmf(theta0, 0.0, 1).tolist()],
                "weights": [0.5, 0.5],
            },
        }
        path = write_json(tmp_path / "cfg.json", cfg)
        res = runner.invoke(main, ["pseudotrue", "--config", path,
                                   "--out", str(tmp_path / "o"), "--overwrite"])
        assert res.exit_code == 0, res.output
        lines = (tmp_path / "o" / "pseudotrue.csv").read_text().splitlines()
        assert lines[0] == "theta_1,theta_2,d_value,accepted"
        assert len(lines) == 1 + 144


class TestMcCommand:
    def mc_config(self):
        return {
            "dgp": {"theta0": list(default_config("D1").theta0), "kappa": 0.5,
                    "gamma": 0.0, "n": 400, "design": "D1"},
            "reps": 3,
            "h_grid": [0.0],
            "theta_star": list(default_config("D1").theta0),
            "alpha": 0.05,
        }

    def test_smoke_run(self, runner, tmp_path):
        path = write_json(tmp_path / "cfg.json", self.mc_config())
        res = runner.invoke(main, ["mc", "--config", path, "--out", str(tmp_path / "o"),
                                   "--overwrite", "--seed", "2"])
        assert res.exit_code == 0, res.output
        lines = (tmp_path / "o" / "rejections.csv").read_text().splitlines()
        assert lines[0] == "gamma,h,rejection_rate,reps,mc_se,failures"
        assert len(lines) == 2
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert "statistic_seconds" in manifest["timings"]
        assert "critical_value_seconds" in manifest["timings"]

    def test_rerun_bitwise_identical_across_threads(self, runner, tmp_path):
        path = write_json(tmp_path / "cfg.json", self.mc_config())
        blobs = []
        for name, threads in (("m1", "1"), ("m2", "2")):
            out = tmp_path / name
            res = runner.invoke(main, ["mc", "--config", path, "--out", str(out),
                                       "--overwrite", "--seed", "2", "--threads", threads])
            assert res.exit_code == 0, res.output
            blobs.append((out / "rejections.csv").read_bytes())
        assert blobs[0] == blobs[1]


class TestSchemas:
    def test_schemas_command(self, runner):
        res = runner.invoke(main, ["schemas"])
        assert res.exit_code == 0
        doc = json.loads(res.output)
        assert set(doc) == {"project", "score", "test", "cs", "ci", "pseudotrue", "mc"}

    def test_per_command_schema_flag(self, runner):
        res = runner.invoke(main, ["cs", "--schema", "--config", "ignored.json"])
        assert res.exit_code == 0
        assert "grid" in res.output

    def test_fresh_timestamped_dirs_without_overwrite(self, runner, tmp_path):
        cfg = {
            "model": ENTRY_MODEL,
            "theta": D1_THETA,
            "x": [0.6, 0.3],
            "p0": [0.25, 0.3, 0.3, 0.15],
            "method": "closed_form",
        }
        path = write_json(tmp_path / "cfg.json", cfg)
        outs = set()
        for _ in range(2):
            res = runner.invoke(main, ["project", "--config", path, "--out", str(tmp_path / "r")])
            assert res.exit_code == 0
            outs.add(res.output.strip())
        assert len(outs) == 2  # never appends into an existing run directory
