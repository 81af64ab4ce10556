import json

import pytest

from twin_trust.app.main import EXIT_INVALID, EXIT_OK, EXIT_PARSE, EXIT_VIOLATIONS, load_trace, main
from twin_trust.services.dt_model import save_twin, serialize_twin
from twin_trust.tests.conftest import BUNDLED_SCENARIOS, CANONICAL_TWIN_PATH, SCENARIO_DIR, make_twin


@pytest.fixture(scope="module")
def violator_run(tmp_path_factory):
    """Artifacts of the separation scenario, written once for the module."""
    out = tmp_path_factory.mktemp("violator")
    assert main(["run", str(SCENARIO_DIR / "separation_violator.json"), "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module", params=BUNDLED_SCENARIOS)
def scenario_run(request, tmp_path_factory):
    out = tmp_path_factory.mktemp(request.param)
    assert main(["run", str(SCENARIO_DIR / f"{request.param}.json"), "--out", str(out)]) == EXIT_OK
    return out


def _assess_args(run_dir, drone_id, out=None):
    args = [
        "assess",
        str(run_dir / "twins" / f"{drone_id}.json"),
        str(run_dir / "traces" / f"{drone_id}.jsonl"),
        str(run_dir / "rules.json"),
        "--peer-dir", str(run_dir / "traces"),
        "--config", str(run_dir / "resolved_config.json"),
    ]
    if out is not None:
        args += ["--out", str(out)]
    return args


class TestValidateCommand:

    def test_canonical_twin_is_valid(self, capsys) -> None:
        assert main(["validate", str(CANONICAL_TWIN_PATH)]) == EXIT_OK
        assert "valid (23 states, 43 transitions)" in capsys.readouterr().out

    def test_missing_file(self, tmp_path) -> None:
        assert main(["validate", str(tmp_path / "absent.json")]) == EXIT_PARSE

    def test_malformed_json(self, tmp_path, capsys) -> None:
        path = tmp_path / "twin.json"
        path.write_text("{ not json")
        assert main(["validate", str(path)]) == EXIT_PARSE
        assert "twin.json:1:" in capsys.readouterr().err

    def test_invalid_fsm(self, tmp_path, capsys) -> None:
        data = json.loads(serialize_twin(make_twin()))
        data["fsm"]["transitions"].append({"from": "S3", "to": "S99", "trigger": "warp"})
        path = tmp_path / "twin.json"
        path.write_text(json.dumps(data))
        assert main(["validate", str(path)]) == EXIT_INVALID
        assert "[unknown_state]" in capsys.readouterr().out

    def test_unknown_annotation(self, tmp_path) -> None:
        data = json.loads(serialize_twin(make_twin()))
        data["fsm"]["states"][0]["safety_annotations"] = ["R-NOPE"]
        path = tmp_path / "twin.json"
        path.write_text(json.dumps(data))
        assert main(["validate", str(path)]) == EXIT_INVALID

    def test_static_findings_are_reported(self, tmp_path, capsys) -> None:
        path = tmp_path / "heavy.json"
        save_twin(make_twin(weight=22.0), path)
        assert main(["validate", str(path)]) == EXIT_OK
        assert "static rule R-WEIGHT" in capsys.readouterr().out


class TestRunCommand:

    def test_missing_scenario(self, tmp_path) -> None:
        assert main(["run", str(tmp_path / "absent.json")]) == EXIT_INVALID

    def test_invalid_scenario(self, tmp_path, capsys) -> None:
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps({"name": "empty", "ticks": 5, "drones": []}))
        assert main(["run", str(path)]) == EXIT_INVALID
        assert "scenario has no drones" in capsys.readouterr().err

    def test_bad_weights(self) -> None:
        assert main(["run", str(SCENARIO_DIR / "honest_pair.json"), "--weights", "0.9"]) == EXIT_INVALID

    @pytest.mark.integration
    def test_run_prints_decisions(self, violator_run, capsys) -> None:
        manifest = json.loads((violator_run / "manifest.json").read_text())
        assert manifest["scenario_name"] == "separation_violator"
        assert "ledger_timeseries.csv" in manifest["outputs"]

    @pytest.mark.integration
    def test_without_out_writes_nothing(self, tmp_path, monkeypatch, capsys) -> None:
        monkeypatch.chdir(tmp_path)
        assert main(["run", str(SCENARIO_DIR / "honest_pair.json"), "--window", "20"]) == EXIT_OK
        assert list(tmp_path.iterdir()) == []
        table = capsys.readouterr().out
        assert "observer" in table and "trusted" in table


@pytest.mark.integration
class TestAssessCommand:

    def test_matches_run_verdict_bytes(self, scenario_run, tmp_path) -> None:
        """Offline assessment reproduces every final verdict of the run byte for byte."""
        finals = sorted((scenario_run / "verdicts" / "final").glob("*.json"))
        assert finals
        for final in finals:
            main(_assess_args(scenario_run, final.stem, tmp_path))
            assert (tmp_path / final.name).read_bytes() == final.read_bytes(), final.stem

    def test_exit_code_reflects_violations(self, violator_run) -> None:
        assert main(_assess_args(violator_run, "B")) == EXIT_VIOLATIONS

    def test_json_output(self, violator_run, capsys) -> None:
        main(_assess_args(violator_run, "B") + ["--json"])
        document = json.loads(capsys.readouterr().out)
        assert document["drone_id"] == "B"
        assert document["summary"]["physics_violation"] > 0

    def test_id_mismatch(self, violator_run) -> None:
        args = [
            "assess",
            str(violator_run / "twins" / "A.json"),
            str(violator_run / "traces" / "B.jsonl"),
        ]
        assert main(args) == EXIT_PARSE

    def test_malformed_trace(self, violator_run, tmp_path) -> None:
        trace = tmp_path / "A.jsonl"
        trace.write_text('{"tick": 0, "drone_id": "A"\n')
        assert main(["assess", str(violator_run / "twins" / "A.json"), str(trace)]) == EXIT_PARSE


class TestLoadTrace:

    def test_empty_trace_takes_given_id(self, tmp_path) -> None:
        path = tmp_path / "X.jsonl"
        path.write_text("")
        assert load_trace(str(path), "D7").drone_id == "D7"
        assert load_trace(str(path)).drone_id == "X"
