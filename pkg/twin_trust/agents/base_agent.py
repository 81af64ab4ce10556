from abc import ABC, abstractmethod
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from twin_trust.app.errors import TwinTrustError
from twin_trust.app.schemas import (
    AgentTraceEntry,
    ComplianceConfig,
    ComplianceVerdict,
    DigitalTwin,
    ExchangeLogEntry,
    LedgerRow,
    MeetingLogEntry,
    SafetyRuleSet,
    SimState,
    STATUS_SEVERITY,
    TelemetryRecord,
    TickStatus,
    TickVerdict,
    Trace,
    TrustConfig,
    Vec3,
    ViolationNotice,
    WindowVerdict,
)
from twin_trust.services.compliance import AssessmentJob
from twin_trust.services.dt_model import deserialize_twin
from twin_trust.services.safety_engine import check_static
from twin_trust.services.trust_engine import (
    new_ledger,
    publish_report,
    receive_report,
    record_window,
    refresh_subject,
)

logger = logging.getLogger(__name__)


def safety_findings(verdict: ComplianceVerdict) -> List[TickVerdict]:
    """First physics or state violation of each rule in a verdict, in tick order."""
    first: Dict[str, TickVerdict] = {}
    for v in verdict.per_tick:
        if STATUS_SEVERITY[v.status] < STATUS_SEVERITY[TickStatus.PHYSICS_VIOLATION]:
            continue
        if v.rule_id is None or v.cause is None:
            continue
        first.setdefault(v.rule_id, v)
    return sorted(first.values(), key=lambda v: (v.tick, v.rule_id))


class BaseAgent(ABC):
    """
    Base class for every simulated participant (drones and the orchestrator).
    Provides standardized state handling, error capture and logging.
    """

    def __init__(self, agent_name: str):
        self.agent_name = agent_name
        self.logger = logging.getLogger(f"agent.{agent_name}")

    @abstractmethod
    def process(self, state: SimState) -> SimState:
        """
        Run this agent's part of the current phase (``state.phase``) and return the state.
        """

    def handle(self, state: SimState) -> SimState:
        """
        Standard entry point for all agents.
        Errors are logged, written to ``state.error`` and to the agent trace.
        """
        try:
            return self.process(state)
        except Exception as e:
            error_msg = f"Error in {self.agent_name} agent during {state.phase}: {e}"
            self.logger.error(error_msg, exc_info=True)
            self.log_interaction(state, "Agent error", error_msg, level="error")
            return state

    def log_interaction(self, state: SimState, decision: str, message: str, level: str = "info"):
        """Helper method to log agent interactions, stamped with the simulation tick."""
        trace_entry = AgentTraceEntry(tick=state.tick, agent=self.agent_name, decision=decision)
        if level == "error":
            trace_entry.level = "error"
            trace_entry.error = message
        state.agent_trace.append(trace_entry)
        state.meeting_log.append(MeetingLogEntry(tick=state.tick, agent=self.agent_name, message=message))

        if level == "error":
            state.error = message
            self.logger.error(f"{self.agent_name}: {message} - Decision: {decision}")
        elif level == "debug":
            self.logger.debug(f"{self.agent_name}: {message} - Decision: {decision}")
        else:
            self.logger.info(f"{self.agent_name}: {message} - Decision: {decision}")


class ObserverAgent(BaseAgent):
    """
    A participant that checks its peers: it keeps their twins, collects their
    telemetry, assesses them per evaluation window and maintains a trust ledger.
    """

    def __init__(
        self,
        agent_name: str,
        rules: SafetyRuleSet,
        compliance: ComplianceConfig,
        trust: TrustConfig,
        orchestrator_id: Optional[str] = None,
    ):
        super().__init__(agent_name)
        self.rules = rules
        self.compliance = compliance
        self.trust = trust
        self.orchestrator_id = orchestrator_id
        self.registry: Dict[str, DigitalTwin] = {}
        self.received: Dict[str, Dict[int, TelemetryRecord]] = {}
        self.ledger = new_ledger(agent_name)

    def ensure_subjects(self, subject_ids: Iterable[str]) -> None:
        for subject_id in subject_ids:
            if subject_id != self.agent_name:
                refresh_subject(self.ledger, subject_id, self.rules, self.trust,
                                orchestrator_id=self.orchestrator_id)

    def missing_twins(self, peer_ids: Iterable[str]) -> List[str]:
        return sorted(p for p in peer_ids if p != self.agent_name and p not in self.registry)

    def receive_twin(self, state: SimState, sender_id: str, document: Optional[str]) -> ExchangeLogEntry:
        """
        Take a peer's twin document. ``None`` means the peer refused to share it.

        A document that does not parse or validate leaves the peer unknown; it is
        then assessed as having no twin.
        """
        status = "refused"
        static: Tuple[str, ...] = ()
        if document is not None:
            try:
                twin = deserialize_twin(document, source=f"twin:{sender_id}")
            except TwinTrustError as e:
                status = "malformed"
                self.log_interaction(state, "Twin rejected", f"twin from {sender_id} is malformed: {e}",
                                     level="debug")
            else:
                status = "unchanged" if self.registry.get(sender_id) == twin else "accepted"
                self.registry[sender_id] = twin
                static = tuple(v.rule_id for v in check_static(twin.attrs, self.rules))
        entry = ExchangeLogEntry(
            tick=state.tick,
            sender_id=sender_id,
            receiver_id=self.agent_name,
            status=status,
            static_violations=static,
        )
        state.exchange_log.append(entry)
        self.log_interaction(state, f"Twin {status}", f"twin exchange with {sender_id}: {status}", level="debug")
        return entry

    def receive_telemetry(self, records: Sequence[TelemetryRecord]) -> None:
        for record in records:
            self.received.setdefault(record.drone_id, {})[record.tick] = record

    def own_records(self) -> Sequence[TelemetryRecord]:
        return ()

    def _position_table(self, end: int) -> Dict[int, Dict[str, Vec3]]:
        table: Dict[int, Dict[str, Vec3]] = {}
        for records in self.received.values():
            for tick, record in records.items():
                if tick <= end:
                    table.setdefault(tick, {})[record.drone_id] = record.pos
        for record in self.own_records():
            if record.tick <= end:
                table.setdefault(record.tick, {})[record.drone_id] = record.pos
        return table

    def assessment_jobs(self, subject_ids: Sequence[str], start: int, end: int) -> List[AssessmentJob]:
        """Window jobs for every subject, in subject order."""
        table = self._position_table(end)
        jobs: List[AssessmentJob] = []
        for subject_id in sorted(subject_ids):
            if subject_id == self.agent_name:
                continue
            records = self.received.get(subject_id, {})
            trace = Trace(
                drone_id=subject_id,
                records=tuple(records[t] for t in sorted(records) if t <= end),
            )
            jobs.append(
                AssessmentJob(
                    observer_id=self.agent_name,
                    subject_id=subject_id,
                    start=start,
                    end=end,
                    twin=self.registry.get(subject_id),
                    trace=trace,
                    peer_positions=table,
                    ticks=tuple(range(start, end + 1)),
                )
            )
        return jobs

    def record_assessments(
        self, state: SimState, results: Sequence[Tuple[AssessmentJob, ComplianceVerdict]]
    ) -> List[WindowVerdict]:
        """Fold window verdicts into the ledger; safety violations are reported to the orchestrator."""
        recorded: List[WindowVerdict] = []
        for job, verdict in results:
            record_window(self.ledger, verdict, self.rules, self.trust)
            window = WindowVerdict(
                observer_id=self.agent_name,
                subject_id=job.subject_id,
                window_start=job.start,
                window_end=job.end,
                verdict=verdict,
            )
            state.window_verdicts.append(window)
            recorded.append(window)
            self.log_interaction(
                state,
                "Window assessed",
                f"{job.subject_id} [{job.start}, {job.end}]: honesty {verdict.honesty:.3f}, "
                f"openness {verdict.openness:.3f}",
                level="debug",
            )
            for finding in safety_findings(verdict):
                self.report_violation(
                    state, job.subject_id, finding.rule_id, finding.cause, finding.tick, finding.peer_id
                )
        return recorded

    def report_violation(self, state: SimState, subject_id: str, rule_id: str, cause, tick: int,
                         peer_id: Optional[str] = None) -> None:
        if self.orchestrator_id is None:
            return
        state.notice_inbox.append(
            ViolationNotice(
                reporter_id=self.agent_name,
                subject_id=subject_id,
                rule_id=rule_id,
                cause=cause,
                tick=tick,
                peer_id=peer_id,
            )
        )

    def publish_reports(self, state: SimState, recipients: Sequence[str]) -> int:
        """Send a reputation report on every evaluated subject to every other participant."""
        sent = 0
        for subject_id, entry in sorted(self.ledger.subjects.items()):
            if entry.evidence.windows == 0:
                continue
            report = publish_report(self.ledger, subject_id, state.tick)
            for recipient in recipients:
                if recipient in (self.agent_name, subject_id):
                    continue
                state.report_inbox.setdefault(recipient, []).append(report)
                sent += 1
        return sent

    def refresh_trust(self, state: SimState, subject_ids: Sequence[str]) -> None:
        """Take delivered reports, recompute every subject and append ledger rows."""
        for report in state.report_inbox.get(self.agent_name, []):
            receive_report(self.ledger, report)
        state.report_inbox[self.agent_name] = []
        for subject_id in sorted(subject_ids):
            if subject_id == self.agent_name:
                continue
            entry = refresh_subject(
                self.ledger, subject_id, self.rules, self.trust, now=state.tick,
                orchestrator_id=self.orchestrator_id,
            )
            state.ledger_rows.append(
                LedgerRow(
                    tick=state.tick,
                    observer_id=self.agent_name,
                    subject_id=subject_id,
                    direct=entry.direct,
                    indirect=entry.indirect,
                    combined=entry.combined,
                    decision=entry.decision,
                    positive=entry.evidence.positive,
                    negative=entry.evidence.negative,
                )
            )

    def untrusted_subjects(self) -> Set[str]:
        return {sid for sid, entry in self.ledger.subjects.items() if entry.decision.value == "untrusted"}
