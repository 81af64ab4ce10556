import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from twin_trust.agents.base_agent import ObserverAgent
from twin_trust.app.errors import UnknownDroneError
from twin_trust.app.schemas import (
    Cause,
    ComplianceConfig,
    PlanDispatch,
    PlanLogEntry,
    RecoveryPlan,
    SafetyRuleSet,
    SimState,
    TrustConfig,
    ViolationNotice,
)
from twin_trust.services import kinematics
from twin_trust.services.safety_engine import DEFAULT_PLAN, required_separation, select_recovery

logger = logging.getLogger(__name__)

SEPARATION_RULES = {"R-SEP", "R-WEATHER-SEP"}


@dataclass
class OpenDispatch:
    dispatch: PlanDispatch
    recipients: Tuple[str, ...]
    cause: Optional[Cause]
    acks: Dict[str, bool] = field(default_factory=dict)


class OrchestratorAgent(ObserverAgent):
    """
    Ecosystem orchestrator.

    RESPONSIBILITIES:
    1. Registers the twins of every drone and assesses every drone per window
    2. Publishes its own reputation reports
    3. Dispatches recovery plans for reported violations (one open dispatch per subject and rule)
    4. Checks feedback every tick: "recovered", or "recovery-failed" at the deadline
    5. Escalates a failed recovery once with the default stop plan
    """

    def __init__(
        self,
        orchestrator_id: str,
        drone_ids: Sequence[str],
        rules: SafetyRuleSet,
        compliance: ComplianceConfig,
        trust: TrustConfig,
    ):
        super().__init__(orchestrator_id, rules, compliance, trust)
        self.drone_ids = sorted(drone_ids)
        self.open: Dict[Tuple[str, str], OpenDispatch] = {}
        self.dispatch_ticks: List[int] = []

    def process(self, state: SimState) -> SimState:
        if state.phase == "orchestrate":
            self.orchestrate(state)
        return state

    def report_violation(self, state: SimState, subject_id: str, rule_id: str, cause, tick: int,
                         peer_id: Optional[str] = None) -> None:
        """Own findings go straight into the notice queue."""
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

    def orchestrate(self, state: SimState) -> None:
        """Collect acknowledgements, check feedback on open dispatches, then handle new notices."""
        for ack in state.ack_inbox:
            entry = self.open.get((ack.subject_id, ack.rule_id))
            if entry is not None and entry.dispatch.plan.id == ack.plan_id:
                entry.acks[ack.drone_id] = ack.applied
        state.ack_inbox = []

        self._check_feedback(state)

        notices = sorted(
            state.notice_inbox,
            key=lambda n: (n.tick, n.subject_id, n.rule_id, n.reporter_id),
        )
        state.notice_inbox = []
        for notice in notices:
            try:
                self.dispatch_recovery(state, notice)
            except UnknownDroneError as e:
                logger.warning(f"Ignoring notice from {notice.reporter_id}: {e}")
                self.log_interaction(state, "Notice rejected", str(e))

    def dispatch_recovery(self, state: SimState, notice: ViolationNotice) -> Optional[PlanDispatch]:
        """
        Select and send the recovery plan for a reported violation.

        Separation violations are dispatched to the subject and the peer it came
        too close to; everything else to the subject only.

        Returns:
            The dispatch, or ``None`` when one is already open for the same subject and rule.

        Raises:
            UnknownDroneError: the notice names a drone that is not registered.
        """
        if notice.subject_id not in self.drone_ids:
            raise UnknownDroneError(notice.subject_id)
        if notice.peer_id is not None and notice.peer_id not in self.drone_ids:
            raise UnknownDroneError(notice.peer_id)
        key = (notice.subject_id, notice.rule_id)
        if key in self.open:
            return None

        plan = select_recovery(notice.rule_id, notice.cause, self.rules)
        recipients: Tuple[str, ...] = (notice.subject_id,)
        if notice.rule_id in SEPARATION_RULES and notice.peer_id is not None:
            recipients = (notice.subject_id, notice.peer_id)
        return self._send(state, plan, notice.subject_id, notice.rule_id, notice.peer_id,
                          recipients, notice.cause, escalation=False)

    def _send(
        self,
        state: SimState,
        plan: RecoveryPlan,
        subject_id: str,
        rule_id: str,
        threat_id: Optional[str],
        recipients: Tuple[str, ...],
        cause: Optional[Cause],
        escalation: bool,
    ) -> PlanDispatch:
        tick = state.tick
        dispatch = PlanDispatch(
            plan=plan,
            subject_id=subject_id,
            rule_id=rule_id,
            threat_id=threat_id,
            dispatch_tick=tick,
            deadline_tick=tick + plan.deadline_ticks,
            escalation=escalation,
        )
        for recipient in recipients:
            state.plan_inbox.setdefault(recipient, []).append(dispatch)
        self.open[(subject_id, rule_id)] = OpenDispatch(dispatch=dispatch, recipients=recipients, cause=cause)
        self.dispatch_ticks.append(tick)
        incidents = self.incidents_in_period(tick)
        kind = "escalation" if escalation else "dispatch"
        self._log_plan(state, kind, dispatch, recipients, cause, incidents)
        self.log_interaction(
            state,
            f"Plan {kind}",
            f"{plan.id} {[a.value for a in plan.actions]} to {', '.join(recipients)} for "
            f"{subject_id}/{rule_id}, deadline {dispatch.deadline_tick}",
        )
        return dispatch

    def incidents_in_period(self, tick: int) -> int:
        period = self.rules.incident_period_ticks
        return sum(1 for t in self.dispatch_ticks if tick - period < t <= tick)

    def _check_feedback(self, state: SimState) -> None:
        for key in sorted(self.open):
            entry = self.open[key]
            dispatch = entry.dispatch
            acknowledged = all(entry.acks.get(r) is True for r in entry.recipients)
            if acknowledged and self._condition_cleared(state, dispatch):
                del self.open[key]
                self._log_plan(state, "recovered", dispatch, entry.recipients, entry.cause,
                               self.incidents_in_period(state.tick))
                self.log_interaction(state, "Recovered", f"{dispatch.subject_id}/{dispatch.rule_id} recovered")
            elif state.tick >= dispatch.deadline_tick:
                del self.open[key]
                self._log_plan(state, "recovery-failed", dispatch, entry.recipients, entry.cause,
                               self.incidents_in_period(state.tick))
                missed = f"{dispatch.subject_id}/{dispatch.rule_id} missed tick {dispatch.deadline_tick}"
                self.log_interaction(state, "Recovery failed", missed)
                if not dispatch.escalation:
                    self._send(state, DEFAULT_PLAN, dispatch.subject_id, dispatch.rule_id,
                               dispatch.threat_id, (dispatch.subject_id,), entry.cause, escalation=True)

    def _condition_cleared(self, state: SimState, dispatch: PlanDispatch) -> bool:
        if dispatch.rule_id in SEPARATION_RULES and dispatch.threat_id is not None:
            subject = state.positions.get(dispatch.subject_id)
            threat = state.positions.get(dispatch.threat_id)
            if subject is None or threat is None:
                return False
            conditions = state.conditions.get(dispatch.subject_id)
            weather = conditions.weather_severe if conditions is not None else False
            return kinematics.distance(subject, threat) >= required_separation(self.rules, weather)
        if dispatch.rule_id == "R-SIGNAL":
            conditions = state.conditions.get(dispatch.subject_id)
            return conditions is None or not conditions.signal_interference
        return True

    def _log_plan(
        self,
        state: SimState,
        kind: str,
        dispatch: PlanDispatch,
        recipients: Tuple[str, ...],
        cause: Optional[Cause],
        incidents: int,
    ) -> None:
        state.plan_log.append(
            PlanLogEntry(
                tick=state.tick,
                kind=kind,
                plan_id=dispatch.plan.id,
                actions=dispatch.plan.actions,
                recipients=recipients,
                subject_id=dispatch.subject_id,
                rule_id=dispatch.rule_id,
                cause=cause,
                deadline_tick=dispatch.deadline_tick,
                incidents_in_period=incidents,
            )
        )
