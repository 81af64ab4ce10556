import json

import pandas as pd
import pytest

from twin_trust.services.exporter import LEDGER_COLUMNS, decisions_frame, decisions_table, export_run
from twin_trust.services.safety_engine import compile_ruleset
from twin_trust.services.settings import config_hash
from twin_trust.tests.conftest import SCENARIO_DIR, bundled_result


@pytest.mark.integration
class TestResultExporter:

    def test_layout_and_manifest(self, tmp_path) -> None:
        result = bundled_result("honest_pair")
        manifest = export_run(result, tmp_path, scenario_path="honest_pair.json")
        expected = {
            "traces/A.jsonl", "traces/B.jsonl", "twins/A.json", "twins/B.json",
            "verdicts/final/A.json", "verdicts/final/B.json", "verdicts/windows.jsonl",
            "ledger_timeseries.csv", "ledgers/A.json", "ledgers/B.json",
            "plan_log.jsonl", "exchange_log.jsonl", "run_log.jsonl", "rules.json", "resolved_config.json",
        }
        assert set(manifest.outputs) == expected
        assert list(manifest.outputs) == sorted(expected)
        for relative in expected:
            assert (tmp_path / relative).is_file()
        on_disk = json.loads((tmp_path / "manifest.json").read_text())
        assert on_disk["config_hash"] == config_hash(result.config)
        assert on_disk["seed"] == 7

    def test_exports_are_byte_identical(self, tmp_path) -> None:
        result = bundled_result("honest_pair")
        first = export_run(result, tmp_path / "one")
        export_run(result, tmp_path / "two")
        for relative in first.outputs + ("manifest.json",):
            assert (tmp_path / "one" / relative).read_bytes() == (tmp_path / "two" / relative).read_bytes()

    def test_ledger_csv(self, tmp_path) -> None:
        result = bundled_result("honest_pair")
        export_run(result, tmp_path)
        frame = pd.read_csv(tmp_path / "ledger_timeseries.csv")
        assert list(frame.columns) == LEDGER_COLUMNS
        assert len(frame) == len(result.ledger_rows)
        last = frame[(frame.observer_id == "A") & (frame.subject_id == "B")].iloc[-1]
        assert last.direct == pytest.approx(11 / 12, abs=1e-6)

    def test_jsonl_line_counts(self, tmp_path) -> None:
        result = bundled_result("separation_violator")
        export_run(result, tmp_path)
        windows = (tmp_path / "verdicts" / "windows.jsonl").read_text().splitlines()
        plans = (tmp_path / "plan_log.jsonl").read_text().splitlines()
        assert len(windows) == len(result.window_verdicts)
        assert [json.loads(line)["kind"] for line in plans] == [e.kind for e in result.plan_log]
        trace = (tmp_path / "traces" / "B.jsonl").read_text().splitlines()
        assert len(trace) == 100

    def test_rules_document_compiles_back(self, tmp_path) -> None:
        result = bundled_result("honest_pair")
        export_run(result, tmp_path)
        assert compile_ruleset(json.loads((tmp_path / "rules.json").read_text())) == result.rules

    def test_decisions_table(self) -> None:
        result = bundled_result("separation_violator")
        frame = decisions_frame(result)
        assert list(frame.observer.unique()) == ["A", "B", "orchestrator"]
        row = frame[(frame.observer == "A") & (frame.subject == "B")].iloc[0]
        assert row.decision == "untrusted"
        assert row.countermeasures != "-"
        assert decisions_table(result).splitlines()[0].split() == list(frame.columns)


def test_scenario_files_exist() -> None:
    assert sorted(p.stem for p in SCENARIO_DIR.glob("*.json")) == [
        "fault_mix", "honest_pair", "separation_violator", "weather_trio",
    ]
