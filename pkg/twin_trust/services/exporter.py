import logging
from pathlib import Path
from typing import Dict, List, Union

import pandas as pd

from twin_trust import __version__
from twin_trust.app.schemas import RunManifest, SimulationResult
from twin_trust.services.compliance import verdict_document
from twin_trust.services.dt_model import serialize_twin
from twin_trust.services.safety_engine import serialize_catalog
from twin_trust.services.settings import config_hash
from twin_trust.services.utils.file_parser import canonical_json, write_json, write_text

logger = logging.getLogger(__name__)

LEDGER_COLUMNS = [
    "tick", "observer_id", "subject_id", "direct", "indirect", "combined", "decision", "positive", "negative",
]
FLOAT_FORMAT = "%.6f"


def ledger_frame(result: SimulationResult) -> pd.DataFrame:
    rows = [row.model_dump(mode="json") for row in result.ledger_rows]
    return pd.DataFrame(rows, columns=LEDGER_COLUMNS)


def decisions_frame(result: SimulationResult) -> pd.DataFrame:
    """Final trust decision of every observer about every subject."""
    rows: List[Dict[str, object]] = []
    for observer_id, ledger in sorted(result.ledgers.items()):
        for subject_id, entry in sorted(ledger.subjects.items()):
            rows.append(
                {
                    "observer": observer_id,
                    "subject": subject_id,
                    "direct": entry.direct,
                    "indirect": entry.indirect,
                    "combined": entry.combined,
                    "decision": entry.decision.value,
                    "countermeasures": ",".join(m.value for m in entry.countermeasures) or "-",
                }
            )
    return pd.DataFrame(
        rows, columns=["observer", "subject", "direct", "indirect", "combined", "decision", "countermeasures"]
    )


def decisions_table(result: SimulationResult) -> str:
    frame = decisions_frame(result)
    if frame.empty:
        return "no trust decisions\n"
    return frame.to_string(index=False, float_format=lambda v: f"{v:.3f}") + "\n"


class ResultExporter:
    """
    Writes every artifact of a run below one output directory.
    All files are canonical (sorted keys, six-decimal floats), so two runs with
    the same inputs produce identical bytes.
    """

    def __init__(self):
        self.name = "exporter"

    def export(self, result: SimulationResult, out_dir: Union[str, Path], scenario_path: str = "") -> RunManifest:
        out = Path(out_dir)
        written: List[str] = []

        def emit(relative: str, text: str) -> None:
            write_text(out / relative, text)
            written.append(relative)

        self._export_traces(result, emit)
        self._export_verdicts(result, emit)
        self._export_ledgers(result, emit)
        emit("plan_log.jsonl", self._jsonl(result.plan_log))
        emit("exchange_log.jsonl", self._jsonl(result.exchange_log))
        emit("run_log.jsonl", self._jsonl(self._run_log_rows(result)))
        emit("rules.json", canonical_json(serialize_catalog(result.rules)))
        emit("resolved_config.json", canonical_json(result.config))

        manifest = RunManifest(
            scenario_path=scenario_path,
            scenario_name=result.scenario_name,
            seed=result.seed,
            config_hash=config_hash(result.config),
            tool_version=__version__,
            outputs=tuple(sorted(written)),
        )
        write_json(out / "manifest.json", manifest)
        logger.info(f"Exported {len(written)} artifacts for '{result.scenario_name}' to {out}")
        return manifest

    @staticmethod
    def _jsonl(rows) -> str:
        return "".join(canonical_json(row, compact=True) + "\n" for row in rows)

    def _export_traces(self, result: SimulationResult, emit) -> None:
        for drone_id, trace in sorted(result.traces.items()):
            emit(f"traces/{drone_id}.jsonl", self._jsonl(trace.records))
        for drone_id, twin in sorted(result.twins.items()):
            emit(f"twins/{drone_id}.json", serialize_twin(twin))

    def _export_verdicts(self, result: SimulationResult, emit) -> None:
        for drone_id, verdict in sorted(result.final_verdicts.items()):
            emit(f"verdicts/final/{drone_id}.json", verdict_document(verdict))
        emit("verdicts/windows.jsonl", self._jsonl(result.window_verdicts))

    def _export_ledgers(self, result: SimulationResult, emit) -> None:
        csv = ledger_frame(result).to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        emit("ledger_timeseries.csv", csv)
        for observer_id, ledger in sorted(result.ledgers.items()):
            emit(f"ledgers/{observer_id}.json", canonical_json(ledger))

    @staticmethod
    def _run_log_rows(result: SimulationResult) -> List[Dict[str, object]]:
        rows = []
        for trace, meeting in zip(result.agent_trace, result.meeting_log):
            rows.append(
                {
                    "tick": trace.tick,
                    "agent": trace.agent,
                    "decision": trace.decision,
                    "level": trace.level or "info",
                    "message": meeting.message,
                    "error": trace.error,
                }
            )
        return rows


# Create singleton instance
result_exporter = ResultExporter()


def export_run(result: SimulationResult, out_dir: Union[str, Path], scenario_path: str = "") -> RunManifest:
    return result_exporter.export(result, out_dir, scenario_path)
