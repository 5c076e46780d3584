import json

import numpy as np
import pytest

from semiclassical_control.cli import main
from semiclassical_control.config import bundled_scenario_path, load_scenario
from semiclassical_control.errors import ConfigError
from semiclassical_control.harness import (
    convergence_study,
    dump_json,
    loglog_slope,
    output_root,
    rows_to_csv,
    rows_to_jsonl,
    run_scenario,
)


@pytest.fixture(scope="module")
def identity():
    return load_scenario(bundled_scenario_path("identity"))


class TestHelpers:
    def test_loglog_slope_of_power_law(self):
        xs = np.array([1.0, 2.0, 4.0, 8.0])
        assert loglog_slope(xs, 3.0 * xs**-2) == pytest.approx(-2.0)

    def test_csv_and_jsonl(self):
        assert rows_to_csv(["a", "b"], [[1, 0.5]]).splitlines() == ["a,b", "1,0.5"]
        assert [json.loads(line) for line in rows_to_jsonl([{"a": 1}, {"b": 2}]).splitlines()] == [{"a": 1}, {"b": 2}]

    def test_dump_json_handles_numpy(self):
        d = json.loads(dump_json({"x": np.float64(1.5), "y": np.arange(2)}))
        assert d == {"x": 1.5, "y": [0, 1]}

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SCL_OUT_DIR", str(tmp_path))
        assert output_root() == tmp_path


class TestRunScenario:
    def test_identity_run_writes_artifacts(self, identity, tmp_path):
        rec = run_scenario(identity, out=tmp_path)
        assert rec.passed
        assert rec.run_dir.name == f"identity-{identity.content_hash()}"
        for rel in ("scenario.cfg", "report.json", "acceptance.json", "controls/eta.csv", "fields/terminal_rho0.csv"):
            assert (rec.run_dir / rel).is_file()
        acc = json.loads((rec.run_dir / "acceptance.json").read_text())
        assert acc["passed"] and acc["checks"]["terminal_error"]["value"] <= 1e-8

    def test_rerun_is_byte_identical(self, identity, tmp_path):
        a = run_scenario(identity, out=tmp_path / "a")
        b = run_scenario(identity, out=tmp_path / "b")
        assert a.manifest == b.manifest


class TestConvergence:
    def test_relaxation_slope(self, identity):
        table = convergence_study("osc", [4, 8, 16, 32], identity)
        assert table.metric == "relaxation"
        assert -1.2 <= table.slope <= -0.8

    def test_grid_self_convergence(self, identity):
        table = convergence_study("grid", [16, 32], identity)
        assert table.column[1] < table.column[0]

    def test_rejects_non_monotone(self, identity):
        with pytest.raises(ConfigError):
            convergence_study("osc", [4, 16, 8], identity)

    def test_rejects_unknown_axis(self, identity):
        with pytest.raises(ConfigError):
            convergence_study("T", [1, 2], identity)

    def test_table_serialisation(self, identity):
        table = convergence_study("osc", [4, 8], identity)
        assert table.to_csv().splitlines()[0] == "value,relaxation"
        recs = [json.loads(line) for line in table.to_jsonl().splitlines()]
        assert recs[-1]["loglog_slope"] == pytest.approx(table.slope)


class TestCLI:
    def test_synthesize(self, tmp_path, capsys):
        assert main(["synthesize", "--config", "identity", "--out", str(tmp_path)]) == 0
        assert "[PASS] terminal_error" in capsys.readouterr().out

    def test_verify_identities_jsonl(self, capsys):
        assert main(["verify-identities", "--max-n", "1", "--format", "jsonl"]) == 0
        recs = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert max(r["bracket_residual"] for r in recs) <= 1e-12

    def test_convergence(self, tmp_path, capsys):
        code = main(["convergence", "--config", "identity", "--axis", "osc", "--sweep", "4,8,16", "--out", str(tmp_path)])
        assert code == 0
        assert "log-log slope" in capsys.readouterr().out
        assert list(tmp_path.glob("*/convergence/osc.csv"))

    def test_simulate_limit(self, tmp_path):
        assert main(["simulate-limit", "--config", "identity", "--out", str(tmp_path)]) == 0
        assert list(tmp_path.glob("*/limit/trajectory_log.jsonl"))

    def test_run_acceptance_subset(self, tmp_path, capsys):
        assert main(["run-acceptance", "--only", "1,2", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.count("[PASS]") == 2
        assert len(json.loads((tmp_path / "acceptance.json").read_text())) == 2

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("scenario.name = x\n")
        assert main(["synthesize", "--config", str(bad), "--out", str(tmp_path)]) == 2
        assert "configuration error" in capsys.readouterr().err

    def test_missing_config(self):
        assert main(["synthesize"]) == 2
