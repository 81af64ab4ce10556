import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Vec3 = Tuple[float, float, float]
Prediction = Tuple[int, Vec3]


class FrozenModel(BaseModel):
    """Immutable value type; unknown fields are rejected."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")


def _finite(vec: Vec3, name: str) -> Vec3:
    if not all(math.isfinite(c) for c in vec):
        raise ValueError(f"{name} must be finite")
    return vec


# ---------------------------------------------------------------------------
# Digital Twin
# ---------------------------------------------------------------------------

class StateCategory(str, Enum):
    MOTION = "motion"
    PERCEPTION = "perception"
    SIGNALING = "signaling"
    BRAKING = "braking"
    SPEED_CONTROL = "speed-control"
    LANE_CONTROL = "lane-control"
    ENVIRONMENT = "environment"
    TERMINAL = "terminal"


class Guard(str, Enum):
    SEPARATION_LT_MIN = "separation_lt_min"
    SEPARATION_GE_MIN = "separation_ge_min"
    SPEED_GT_ZERO = "speed_gt_zero"
    SPEED_ZERO = "speed_zero"
    WEATHER_SEVERE = "weather_severe"
    WEATHER_CLEAR = "weather_clear"


# Pairs that can never hold together; such guards may share a (from, trigger).
GUARD_COMPLEMENTS: Dict[Guard, Guard] = {
    Guard.SEPARATION_LT_MIN: Guard.SEPARATION_GE_MIN,
    Guard.SEPARATION_GE_MIN: Guard.SEPARATION_LT_MIN,
    Guard.SPEED_GT_ZERO: Guard.SPEED_ZERO,
    Guard.SPEED_ZERO: Guard.SPEED_GT_ZERO,
    Guard.WEATHER_SEVERE: Guard.WEATHER_CLEAR,
    Guard.WEATHER_CLEAR: Guard.WEATHER_SEVERE,
}


class PredictionModel(str, Enum):
    CONSTANT_VELOCITY = "constant-velocity"
    CONSTANT_ACCELERATION = "constant-acceleration"


class FsmState(FrozenModel):
    id: str = Field(min_length=1)
    name: str
    category: StateCategory
    safety_annotations: Tuple[str, ...] = ()


class FsmTransition(FrozenModel):
    source: str = Field(alias="from")
    target: str = Field(alias="to")
    trigger: str = Field(min_length=1)
    guard: Optional[Guard] = None


class FsmSpec(FrozenModel):
    initial: str
    terminal: Tuple[str, ...] = ()
    states: Tuple[FsmState, ...]
    transitions: Tuple[FsmTransition, ...] = ()

    def state_ids(self) -> List[str]:
        return [s.id for s in self.states]

    def get_state(self, state_id: str) -> Optional[FsmState]:
        for state in self.states:
            if state.id == state_id:
                return state
        return None


class StaticAttributes(FrozenModel):
    weight_kg: float = Field(gt=0)
    max_speed_mps: float = Field(gt=0)
    comm_ratio: float = Field(ge=0, le=1)
    license_ok: bool = True
    airworthiness_ok: bool = True


class PredictionParams(FrozenModel):
    horizon_ticks: int = Field(default=10, ge=1)
    model: PredictionModel = PredictionModel.CONSTANT_VELOCITY
    broadcast_period_ticks: int = Field(default=5, ge=1)


class DigitalTwin(FrozenModel):
    dt_version: str = "1.0"
    drone_id: str = Field(min_length=1)
    attrs: StaticAttributes
    fsm: FsmSpec
    mission: Tuple[Vec3, ...] = Field(min_length=1)
    prediction: PredictionParams = PredictionParams()

    @field_validator("mission")
    @classmethod
    def _mission_finite(cls, mission: Tuple[Vec3, ...]) -> Tuple[Vec3, ...]:
        for waypoint in mission:
            _finite(waypoint, "waypoint")
        return mission


class FsmViolation(FrozenModel):
    kind: str  # unknown_state | unreachable_state | nondeterministic | dead_state | ...
    message: str
    ref: Optional[str] = None


class ValidationReport(FrozenModel):
    violations: Tuple[FsmViolation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations


# ---------------------------------------------------------------------------
# Safety catalog
# ---------------------------------------------------------------------------

class Severity(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CATASTROPHIC = "catastrophic"


SEVERITY_RANK: Dict[Severity, int] = {
    Severity.LOW: 0,
    Severity.MEDIUM: 1,
    Severity.HIGH: 2,
    Severity.CATASTROPHIC: 3,
}


class UcaType(str, Enum):
    COMMISSION = "commission"
    OMISSION = "omission"
    TOO_EARLY = "too_early"
    TOO_LATE = "too_late"
    WRONG_VALUE = "wrong_value"


CONFORMING = "conforming"


class Cause(str, Enum):
    CONNECTION_PROBLEM = "connection_problem"
    ENVIRONMENT_INFLUENCE = "environment_influence"
    INTERNAL_FAULT = "internal_fault"
    COORDINATION_FAILURE = "coordination_failure"


class Countermeasure(str, Enum):
    AVOID = "avoid"
    MINIMIZE_SPEED = "minimize_speed"
    STOP = "stop"
    REROUTE = "reroute"
    NOTIFY_ORCHESTRATOR = "notify_orchestrator"


class Hazard(FrozenModel):
    id: str = Field(min_length=1)
    description: str = ""
    system_boundary: Tuple[str, ...] = ()
    severity: Severity


class UcaTemplate(FrozenModel):
    id: str = Field(min_length=1)
    hazard_id: str
    action: str
    uca_type: UcaType
    condition: Optional[str] = None


class CausalFactor(FrozenModel):
    id: str = Field(min_length=1)
    uca_id: str
    cause: Cause
    recovery_plan_id: str


class RecoveryPlan(FrozenModel):
    id: str = Field(min_length=1)
    actions: Tuple[Countermeasure, ...] = Field(min_length=1)
    deadline_ticks: int = Field(ge=1)


class NumericRules(FrozenModel):
    min_separation_m: float = Field(default=40.0, gt=0)
    max_weight_kg: float = Field(default=20.0, gt=0)
    weather_separation_factor: float = Field(default=1.5, ge=1)
    max_speed_mps: float = Field(default=25.0, gt=0)
    timing_tolerance_ticks: int = Field(default=2, ge=0)
    incident_period_ticks: int = Field(default=100, ge=1)
    min_comm_ratio: float = Field(default=0.0, ge=0, le=1)


class HazardCatalog(FrozenModel):
    """The hazard-analysis document as authored, before reference checks."""

    hazards: Tuple[Hazard, ...] = ()
    ucas: Tuple[UcaTemplate, ...] = ()
    factors: Tuple[CausalFactor, ...] = ()
    plans: Tuple[RecoveryPlan, ...] = ()
    numeric: NumericRules = NumericRules()
    rule_hazards: Dict[str, str] = Field(default_factory=dict)


class SafetyRuleSet(FrozenModel):
    min_separation_m: float = Field(default=40.0, gt=0)
    max_weight_kg: float = Field(default=20.0, gt=0)
    weather_separation_factor: float = Field(default=1.5, ge=1)
    max_speed_mps: float = Field(default=25.0, gt=0)
    timing_tolerance_ticks: int = Field(default=2, ge=0)
    incident_period_ticks: int = Field(default=100, ge=1)
    min_comm_ratio: float = Field(default=0.0, ge=0, le=1)
    hazards: Tuple[Hazard, ...] = ()
    ucas: Tuple[UcaTemplate, ...] = ()
    factors: Tuple[CausalFactor, ...] = ()
    plans: Tuple[RecoveryPlan, ...] = ()
    rule_hazards: Dict[str, str] = Field(default_factory=dict)
    rule_ids: Tuple[str, ...] = ()

    def get_hazard(self, hazard_id: str) -> Optional[Hazard]:
        return next((h for h in self.hazards if h.id == hazard_id), None)

    def get_uca(self, uca_id: str) -> Optional[UcaTemplate]:
        return next((u for u in self.ucas if u.id == uca_id), None)

    def get_plan(self, plan_id: str) -> Optional[RecoveryPlan]:
        return next((p for p in self.plans if p.id == plan_id), None)


class SeparationResult(FrozenModel):
    ok: bool
    distance_m: float
    required_m: float


class RuleViolation(FrozenModel):
    rule_id: str
    message: str
    hazard_id: Optional[str] = None


# ---------------------------------------------------------------------------
# Telemetry and compliance
# ---------------------------------------------------------------------------

class TelemetryRecord(FrozenModel):
    tick: int = Field(ge=0)
    drone_id: str
    pos: Vec3
    vel: Vec3
    declared_state: Optional[str] = None
    events: Tuple[str, ...] = ()
    broadcast_futures: Tuple[Prediction, ...] = ()

    @field_validator("pos", "vel")
    @classmethod
    def _vector_finite(cls, vec: Vec3) -> Vec3:
        return _finite(vec, "vector")


class Trace(FrozenModel):
    drone_id: str
    records: Tuple[TelemetryRecord, ...] = ()

    @model_validator(mode="after")
    def _check_records(self) -> "Trace":
        last = -1
        for record in self.records:
            if record.drone_id != self.drone_id:
                raise ValueError(f"record for '{record.drone_id}' in trace of '{self.drone_id}'")
            if record.tick <= last:
                raise ValueError(f"ticks must be strictly increasing (tick {record.tick})")
            last = record.tick
        return self


class TickStatus(str, Enum):
    CONFORMING = "conforming"
    UNDECLARED = "undeclared"
    PREDICTION_VIOLATION = "prediction_violation"
    PHYSICS_VIOLATION = "physics_violation"
    STATE_VIOLATION = "state_violation"


STATUS_SEVERITY: Dict[TickStatus, int] = {
    TickStatus.CONFORMING: 0,
    TickStatus.UNDECLARED: 1,
    TickStatus.PREDICTION_VIOLATION: 2,
    TickStatus.PHYSICS_VIOLATION: 3,
    TickStatus.STATE_VIOLATION: 4,
}


class TickVerdict(FrozenModel):
    tick: int
    status: TickStatus
    uca_type: Optional[str] = None
    rule_id: Optional[str] = None
    cause: Optional[Cause] = None
    peer_id: Optional[str] = None
    detail: Optional[str] = None


class ComplianceVerdict(FrozenModel):
    drone_id: str
    per_tick: Tuple[TickVerdict, ...] = ()
    honesty: float = Field(ge=0, le=1)
    openness: float = Field(ge=0, le=1)
    declared_fraction: float = Field(default=1.0, ge=0, le=1)
    broadcast_adherence: float = Field(default=1.0, ge=0, le=1)
    announcement_adherence: float = Field(default=1.0, ge=0, le=1)
    no_declaration: bool = False
    no_twin: bool = False
    summary: Dict[str, int] = Field(default_factory=dict)


class ComplianceConfig(FrozenModel):
    stop_epsilon_mps: float = Field(default=0.1, ge=0)
    speed_epsilon_mps: float = Field(default=0.1, ge=0)
    prediction_epsilon_m: float = Field(default=5.0, gt=0)
    turn_announce_deg: float = Field(default=5.0, gt=0)


# ---------------------------------------------------------------------------
# Trust
# ---------------------------------------------------------------------------

class Decision(str, Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"
    UNKNOWN = "unknown"


class DirectEvidence(FrozenModel):
    positive: int = Field(default=0, ge=0)
    negative: int = Field(default=0, ge=0)
    last_honesty: float = Field(default=1.0, ge=0, le=1)
    last_openness: float = Field(default=1.0, ge=0, le=1)

    @property
    def windows(self) -> int:
        return self.positive + self.negative


class ReputationReport(FrozenModel):
    reporter_id: str
    subject_id: str
    score: float = Field(ge=0, le=1)
    window_count: int = Field(ge=1)
    tick_issued: int = Field(ge=0)


class TrustDecision(FrozenModel):
    decision: Decision
    combined: float
    threshold: float
    countermeasures: Tuple[Countermeasure, ...] = ()
    vetoed: bool = False


class SubjectTrust(BaseModel):
    """Per-subject ledger row. Mutated only by the ledger's owner."""

    subject_id: str
    evidence: DirectEvidence = DirectEvidence()
    reports: List[ReputationReport] = Field(default_factory=list)
    direct: float = 0.5
    indirect: float = 0.5
    combined: float = 0.5
    decision: Decision = Decision.UNKNOWN
    countermeasures: List[Countermeasure] = Field(default_factory=list)
    last_violation: Optional[TickVerdict] = None
    veto_window: Optional[int] = None
    windows_seen: int = 0


class TrustLedger(BaseModel):
    owner_id: str
    subjects: Dict[str, SubjectTrust] = Field(default_factory=dict)


class TrustConfig(FrozenModel):
    honesty_threshold: float = Field(default=0.95, ge=0, le=1)
    openness_floor: float = Field(default=0.5, ge=0, le=1)
    report_trust_floor: float = Field(default=0.3, ge=0, le=1)
    weights: Tuple[float, float] = (0.7, 0.3)
    threshold: float = 0.5
    max_report_age_ticks: Optional[int] = Field(default=None, ge=0)
    orchestrator_trust: float = Field(default=1.0, ge=0, le=1)
    safety_veto: bool = True
    veto_min_severity: Severity = Severity.HIGH
    veto_hold_windows: Optional[int] = Field(default=None, ge=1)


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

class SimConfig(FrozenModel):
    turn_rate_deg: float = Field(default=15.0, gt=0)
    accel_limit_mps2: float = Field(default=1.0, gt=0)
    arrival_radius_m: float = Field(default=2.0, gt=0)
    awareness_factor: float = Field(default=2.0, ge=1)
    avoid_clearance_factor: float = Field(default=2.0, ge=1)
    reduced_speed_factor: float = Field(default=0.5, gt=0, le=1)
    drop_probability: float = Field(default=0.0, ge=0, le=1)
    rebroadcast_tolerance_m: float = Field(default=0.5, ge=0)
    reroute_altitude_m: float = Field(default=10.0)
    parallel_assessments: bool = False


class DeviationKind(str, Enum):
    WRONG_STATE = "wrong_state"
    SPEED_BURST = "speed_burst"
    IGNORE_SEPARATION = "ignore_separation"
    SILENT = "silent"
    FALSE_PREDICTION = "false_prediction"


class DeviationOverride(FrozenModel):
    start_tick: int = Field(ge=0)
    end_tick: int = Field(ge=0)  # inclusive
    kind: DeviationKind
    state_id: Optional[str] = None
    speed_mps: Optional[float] = Field(default=None, gt=0)
    offset_m: Optional[float] = None

    @model_validator(mode="after")
    def _check_override(self) -> "DeviationOverride":
        if self.end_tick < self.start_tick:
            raise ValueError("end_tick must not precede start_tick")
        if self.kind == DeviationKind.WRONG_STATE and not self.state_id:
            raise ValueError("wrong_state needs state_id")
        if self.kind == DeviationKind.SPEED_BURST and self.speed_mps is None:
            raise ValueError("speed_burst needs speed_mps")
        if self.kind == DeviationKind.FALSE_PREDICTION and self.offset_m is None:
            raise ValueError("false_prediction needs offset_m")
        return self

    def covers(self, tick: int) -> bool:
        return self.start_tick <= tick <= self.end_tick


class DeviationScript(FrozenModel):
    overrides: Tuple[DeviationOverride, ...] = ()

    def active(self, tick: int) -> Optional[DeviationOverride]:
        return next((o for o in self.overrides if o.covers(tick)), None)


class Behavior(str, Enum):
    HONEST = "honest"
    DEVIANT = "deviant"


class AgentConfig(FrozenModel):
    drone_id: str = Field(min_length=1)
    start: Vec3
    mission: Tuple[Vec3, ...] = Field(min_length=1)
    attrs: StaticAttributes
    prediction: PredictionParams = PredictionParams()
    cruise_speed_mps: float = Field(gt=0)
    behavior: Behavior = Behavior.HONEST
    script: DeviationScript = DeviationScript()


class ObjectEvent(FrozenModel):
    tick: int = Field(ge=0)
    drone_id: str
    duration_ticks: int = Field(default=0, ge=0)


class IntervalEvent(FrozenModel):
    start_tick: int = Field(ge=0)
    end_tick: int = Field(ge=0)  # inclusive
    drone_ids: Optional[Tuple[str, ...]] = None  # None means every drone

    def applies(self, drone_id: str, tick: int) -> bool:
        if not self.start_tick <= tick <= self.end_tick:
            return False
        return self.drone_ids is None or drone_id in self.drone_ids


class ScenarioEvents(FrozenModel):
    objects: Tuple[ObjectEvent, ...] = ()
    weather_severe: Tuple[IntervalEvent, ...] = ()
    signal_interference: Tuple[IntervalEvent, ...] = ()


class OrchestratorConfig(FrozenModel):
    id: str = "orchestrator"


class Scenario(FrozenModel):
    name: str
    seed: int = 0
    ticks: int = Field(ge=0)
    drones: Tuple[AgentConfig, ...]
    events: ScenarioEvents = ScenarioEvents()
    eval_window_ticks: int = Field(default=10, ge=1)
    rules_catalog: str = "default"
    orchestrator: Optional[OrchestratorConfig] = None
    compliance: ComplianceConfig = ComplianceConfig()
    trust: TrustConfig = TrustConfig()
    sim: SimConfig = SimConfig()


class ResolvedConfig(FrozenModel):
    """Everything that determines a run's output."""

    scenario_name: str
    seed: int
    ticks: int
    eval_window_ticks: int
    rules_catalog: str
    compliance: ComplianceConfig
    trust: TrustConfig
    sim: SimConfig
    version: str


# ---------------------------------------------------------------------------
# Simulation state and messages
# ---------------------------------------------------------------------------

class DroneConditions(FrozenModel):
    weather_severe: bool = False
    signal_interference: bool = False
    object_kind: Optional[str] = None  # transient | persistent


class ViolationNotice(FrozenModel):
    reporter_id: str
    subject_id: str
    rule_id: str
    cause: Cause
    tick: int
    peer_id: Optional[str] = None


class PlanDispatch(FrozenModel):
    plan: RecoveryPlan
    subject_id: str
    rule_id: str
    threat_id: Optional[str] = None
    dispatch_tick: int
    deadline_tick: int
    escalation: bool = False


class PlanAck(FrozenModel):
    drone_id: str
    subject_id: str
    rule_id: str
    plan_id: str
    tick: int
    applied: bool


class PlanLogEntry(FrozenModel):
    tick: int
    kind: str  # dispatch | recovered | recovery-failed | escalation
    plan_id: str
    actions: Tuple[Countermeasure, ...] = ()
    recipients: Tuple[str, ...] = ()
    subject_id: str
    rule_id: str
    cause: Optional[Cause] = None
    deadline_tick: Optional[int] = None
    incidents_in_period: int = 0


class ExchangeLogEntry(FrozenModel):
    tick: int
    sender_id: str
    receiver_id: str
    status: str  # accepted | unchanged | refused | malformed
    static_violations: Tuple[str, ...] = ()


class WindowVerdict(FrozenModel):
    observer_id: str
    subject_id: str
    window_start: int
    window_end: int
    verdict: ComplianceVerdict


class LedgerRow(FrozenModel):
    tick: int
    observer_id: str
    subject_id: str
    direct: float
    indirect: float
    combined: float
    decision: Decision
    positive: int
    negative: int


class AgentTraceEntry(BaseModel):
    tick: int
    agent: str
    decision: str
    level: Optional[str] = None  # e.g., 'info', 'error'
    error: Optional[str] = None


class MeetingLogEntry(BaseModel):
    tick: int
    agent: str
    message: str


class SimState(BaseModel):
    """Blackboard shared by the agents of one run; the simulator owns it."""

    scenario_name: str
    seed: int = 0
    tick: int = 0
    phase: str = "setup"
    conditions: Dict[str, DroneConditions] = Field(default_factory=dict)
    positions: Dict[str, Vec3] = Field(default_factory=dict)
    records: Dict[str, TelemetryRecord] = Field(default_factory=dict)
    report_inbox: Dict[str, List[ReputationReport]] = Field(default_factory=dict)
    plan_inbox: Dict[str, List[PlanDispatch]] = Field(default_factory=dict)
    notice_inbox: List[ViolationNotice] = Field(default_factory=list)
    ack_inbox: List[PlanAck] = Field(default_factory=list)
    window_verdicts: List[WindowVerdict] = Field(default_factory=list)
    ledger_rows: List[LedgerRow] = Field(default_factory=list)
    plan_log: List[PlanLogEntry] = Field(default_factory=list)
    exchange_log: List[ExchangeLogEntry] = Field(default_factory=list)
    meeting_log: List[MeetingLogEntry] = Field(default_factory=list)
    agent_trace: List[AgentTraceEntry] = Field(default_factory=list)
    error: Optional[str] = None


class SimulationResult(BaseModel):
    scenario_name: str
    seed: int
    config: ResolvedConfig
    rules: SafetyRuleSet
    twins: Dict[str, DigitalTwin]
    traces: Dict[str, Trace]
    final_verdicts: Dict[str, ComplianceVerdict]
    window_verdicts: List[WindowVerdict] = Field(default_factory=list)
    ledgers: Dict[str, TrustLedger] = Field(default_factory=dict)
    ledger_rows: List[LedgerRow] = Field(default_factory=list)
    plan_log: List[PlanLogEntry] = Field(default_factory=list)
    exchange_log: List[ExchangeLogEntry] = Field(default_factory=list)
    agent_trace: List[AgentTraceEntry] = Field(default_factory=list)
    meeting_log: List[MeetingLogEntry] = Field(default_factory=list)


class RunManifest(FrozenModel):
    scenario_path: str
    scenario_name: str
    seed: int
    config_hash: str
    tool_version: str
    outputs: Tuple[str, ...] = ()
