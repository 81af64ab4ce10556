"""Run-time compliance checking of observed telemetry against a declared Digital Twin.

Three dimensions are checked per tick: the declared FSM state, the physical
behaviour the declared state promises, and the broadcast future positions.
The worst dimension decides the tick's status.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from twin_trust.app.errors import IdMismatchError
from twin_trust.app.schemas import (
    CONFORMING,
    STATUS_SEVERITY,
    ComplianceConfig,
    ComplianceVerdict,
    DigitalTwin,
    Guard,
    SafetyRuleSet,
    TelemetryRecord,
    TickStatus,
    TickVerdict,
    Trace,
    UcaType,
    Vec3,
)
from twin_trust.services import kinematics
from twin_trust.services.dt_model import apply_events, reachable_states, step_fsm, NO_TRANSITION
from twin_trust.services.safety_engine import (
    check_separation,
    classify_uca,
    hazard_for,
    infer_cause,
    required_separation,
)
from twin_trust.services.utils.file_parser import canonical_json

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = ComplianceConfig()

PeerPositions = Mapping[int, Mapping[str, Vec3]]

# Covers six-decimal quantization of recorded velocity components.
SPEED_TOLERANCE = 1e-6

TURN_ANNOUNCED = "turn_announced"
SPEED_CHANGE_ANNOUNCED = "speed_change_announced"
WEATHER_SEVERE = "weather_severe"
SIGNAL_INTERFERENCE = "signal_interference"

# Control action each annotation expects; used to classify physics violations.
ANNOTATION_ACTIONS = {
    "R-STOP": "stop",
    "R-BRAKE": "brake",
    "R-ACCEL": "accelerate",
    "R-DECEL": "decelerate",
    "R-KEEP": "keep_speed",
}


def peer_positions_from_traces(
    traces: Iterable[Trace], exclude: Optional[str] = None
) -> Dict[int, Dict[str, Vec3]]:
    """Index peer traces by tick: ``{tick: {peer_id: pos}}``."""
    table: Dict[int, Dict[str, Vec3]] = {}
    for trace in traces:
        if trace.drone_id == exclude:
            continue
        for record in trace.records:
            table.setdefault(record.tick, {})[trace.drone_id] = record.pos
    return table


def _peers_at(peer_positions: Optional[PeerPositions], tick: int, subject: str) -> List[Tuple[str, Vec3]]:
    if not peer_positions:
        return []
    at_tick = peer_positions.get(tick, {})
    return sorted((pid, pos) for pid, pos in at_tick.items() if pid != subject)


def is_weather_severe(record: TelemetryRecord) -> bool:
    return WEATHER_SEVERE in record.events


def evaluate_guards(
    record: TelemetryRecord,
    rules: SafetyRuleSet,
    peers: Sequence[Tuple[str, Vec3]],
    config: ComplianceConfig = DEFAULT_CONFIG,
) -> Dict[Guard, bool]:
    """Valuation of the guard vocabulary over one telemetry record."""
    weather = is_weather_severe(record)
    required = required_separation(rules, weather)
    too_close = any(kinematics.distance(record.pos, pos) < required for _, pos in peers)
    moving = kinematics.speed_of(record.vel) > config.stop_epsilon_mps
    return {
        Guard.SEPARATION_LT_MIN: too_close,
        Guard.SEPARATION_GE_MIN: not too_close,
        Guard.SPEED_GT_ZERO: moving,
        Guard.SPEED_ZERO: not moving,
        Guard.WEATHER_SEVERE: weather,
        Guard.WEATHER_CLEAR: not weather,
    }


def observed_motion(prev_speed: Optional[float], speed: float, config: ComplianceConfig) -> str:
    if speed <= config.stop_epsilon_mps:
        return "stop"
    if prev_speed is None:
        return "keep_speed"
    delta = speed - prev_speed
    if delta > config.speed_epsilon_mps:
        return "accelerate"
    if delta < -config.speed_epsilon_mps:
        return "decelerate"
    return "keep_speed"


def intent_due(
    prev_vel: Optional[Sequence[float]],
    vel: Sequence[float],
    config: ComplianceConfig = DEFAULT_CONFIG,
) -> List[str]:
    """Announcements owed to neighbours for the change from ``prev_vel`` to ``vel``."""
    if prev_vel is None:
        return []
    due: List[str] = []
    prev_speed, speed = kinematics.speed_of(prev_vel), kinematics.speed_of(vel)
    if (
        prev_speed > config.stop_epsilon_mps
        and speed > config.stop_epsilon_mps
        and kinematics.heading_change_deg(prev_vel, vel) > config.turn_announce_deg
    ):
        due.append(TURN_ANNOUNCED)
    if abs(speed - prev_speed) > config.speed_epsilon_mps:
        due.append(SPEED_CHANGE_ANNOUNCED)
    return due


def _consecutive(prev: Optional[TelemetryRecord], record: TelemetryRecord) -> Optional[TelemetryRecord]:
    if prev is not None and prev.tick == record.tick - 1:
        return prev
    return None


def _physics_verdict(
    record: TelemetryRecord,
    rule_id: str,
    uca_type: str,
    detail: str,
    peer_id: Optional[str] = None,
) -> TickVerdict:
    return TickVerdict(
        tick=record.tick,
        status=TickStatus.PHYSICS_VIOLATION,
        uca_type=uca_type,
        rule_id=rule_id,
        cause=infer_cause(rule_id, record.events),
        peer_id=peer_id,
        detail=detail,
    )


def check_record_physics(
    twin: DigitalTwin,
    record: TelemetryRecord,
    prev: Optional[TelemetryRecord],
    rules: SafetyRuleSet,
    peers: Sequence[Tuple[str, Vec3]],
    config: ComplianceConfig = DEFAULT_CONFIG,
) -> Optional[TickVerdict]:
    """
    Physics check of one record; ``None`` when it conforms.

    ``prev`` is only used when it is the record of the immediately preceding tick.
    """
    prev = _consecutive(prev, record)
    speed = kinematics.speed_of(record.vel)
    prev_speed = kinematics.speed_of(prev.vel) if prev is not None else None
    motion = observed_motion(prev_speed, speed, config)

    state = twin.fsm.get_state(record.declared_state) if record.declared_state is not None else None
    annotations = state.safety_annotations if state is not None else ()

    # Loss of separation outranks every other physics finding on the same tick.
    if "R-SEP" in annotations:
        verdict = _separation_verdict(record, rules, peers)
        if verdict is not None:
            return verdict

    if speed > twin.attrs.max_speed_mps + SPEED_TOLERANCE:
        uca = classify_uca(None, "exceed_speed", record.tick, record.tick, rules)
        return _physics_verdict(
            record, "R-SPEED", uca, f"speed {speed:.3f} exceeds declared {twin.attrs.max_speed_mps}"
        )

    if state is None:
        return None
    for rule_id in annotations:
        if rule_id not in ANNOTATION_ACTIONS:
            continue
        if _annotation_holds(rule_id, speed, prev_speed, config):
            continue
        uca = classify_uca(
            ANNOTATION_ACTIONS[rule_id], motion, record.tick, record.tick, rules,
            _hazard_id(rules, rule_id),
        )
        return _physics_verdict(
            record, rule_id, uca,
            f"{state.id} expects {ANNOTATION_ACTIONS[rule_id]}, observed {motion} at speed {speed:.3f}",
        )
    return None


def _annotation_holds(
    rule_id: str, speed: float, prev_speed: Optional[float], config: ComplianceConfig
) -> bool:
    if rule_id == "R-STOP":
        return speed <= config.stop_epsilon_mps
    if prev_speed is None:
        # Rate rules need the previous tick.
        return True
    if rule_id == "R-BRAKE":
        return speed <= config.stop_epsilon_mps or speed <= prev_speed + config.speed_epsilon_mps
    if rule_id == "R-ACCEL":
        return speed > prev_speed
    if rule_id == "R-DECEL":
        return speed < prev_speed
    if rule_id == "R-KEEP":
        return abs(speed - prev_speed) <= config.speed_epsilon_mps
    return True


def _separation_verdict(
    record: TelemetryRecord,
    rules: SafetyRuleSet,
    peers: Sequence[Tuple[str, Vec3]],
) -> Optional[TickVerdict]:
    weather = is_weather_severe(record)
    worst: Optional[Tuple[float, str, float]] = None
    for peer_id, pos in peers:
        result = check_separation(record.pos, pos, rules, weather)
        if result.ok:
            continue
        dist = kinematics.distance(record.pos, pos)
        if worst is None or dist < worst[0]:
            worst = (dist, peer_id, result.required_m)
    if worst is None:
        return None
    dist, peer_id, required = worst
    rule_id = "R-WEATHER-SEP" if weather and dist >= rules.min_separation_m else "R-SEP"
    action = "increase_separation" if rule_id == "R-WEATHER-SEP" else "maintain_separation"
    uca = classify_uca(action, None, record.tick, None, rules, _hazard_id(rules, rule_id))
    return _physics_verdict(
        record, rule_id, uca, f"distance to {peer_id} {dist:.3f} m below {required:g} m", peer_id
    )


def _hazard_id(rules: SafetyRuleSet, rule_id: str) -> Optional[str]:
    hazard = hazard_for(rules, rule_id)
    return hazard.id if hazard is not None else None


def _check_ids(twin: DigitalTwin, trace: Trace) -> None:
    if twin.drone_id != trace.drone_id:
        raise IdMismatchError(twin.drone_id, trace.drone_id)


def check_state_conformance(
    twin: DigitalTwin,
    trace: Trace,
    rules: Optional[SafetyRuleSet] = None,
    peer_positions: Optional[PeerPositions] = None,
    config: ComplianceConfig = DEFAULT_CONFIG,
) -> List[TickVerdict]:
    """
    Declared-state conformance per tick.

    The monitor keeps its own expected state, advanced by each tick's events.
    The first record may declare the initial state, its ``power_on``
    successor or the state its own events lead to. A first record that still
    declares the initial state although its events moved on lets the next
    record continue from either state. After an undeclared record or a
    telemetry gap, any declared state reachable from the expected one
    resynchronizes the monitor.
    """
    _check_ids(twin, trace)
    rules = rules or SafetyRuleSet()
    spec = twin.fsm
    known = set(spec.state_ids())
    verdicts: List[TickVerdict] = []
    expected: Optional[str] = None
    alternate: Optional[str] = None
    prev: Optional[TelemetryRecord] = None

    for record in trace.records:
        env = evaluate_guards(record, rules, _peers_at(peer_positions, record.tick, trace.drone_id), config)
        declared = record.declared_state
        if expected is None:
            nxt = apply_events(spec, spec.initial, record.events, env)
            allowed = {spec.initial, nxt}
            powered = step_fsm(spec, spec.initial, "power_on", env)
            if powered != NO_TRANSITION:
                allowed.add(powered)
            resync: set = set()
        else:
            nxt = apply_events(spec, expected, record.events, env)
            allowed = {nxt}
            if alternate is not None:
                allowed.add(apply_events(spec, alternate, record.events, env))
            gap = prev is None or prev.tick != record.tick - 1 or prev.declared_state is None
            resync = reachable_states(spec, nxt) if gap else set()
        carry = nxt if expected is None and declared == spec.initial and nxt != spec.initial else None
        alternate = None

        if declared is None:
            verdicts.append(
                TickVerdict(
                    tick=record.tick,
                    status=TickStatus.UNDECLARED,
                    uca_type=classify_uca("declare_state", None, record.tick, None, rules),
                    rule_id="R-DECLARE",
                    cause=infer_cause("R-DECLARE", record.events),
                    detail="no declared state",
                )
            )
            expected = nxt
        elif declared in allowed or (declared in known and declared in resync):
            verdicts.append(TickVerdict(tick=record.tick, status=TickStatus.CONFORMING))
            expected = declared
            alternate = carry
        else:
            uca = classify_uca(nxt, declared, record.tick, record.tick, rules, _hazard_id(rules, "R-FSM"))
            reason = "unknown state" if declared not in known else f"expected {nxt}"
            verdicts.append(
                TickVerdict(
                    tick=record.tick,
                    status=TickStatus.STATE_VIOLATION,
                    uca_type=uca,
                    rule_id="R-FSM",
                    cause=infer_cause("R-FSM", record.events),
                    detail=f"declared {declared}, {reason}",
                )
            )
            expected = nxt
        prev = record
    return verdicts


def check_physics_conformance(
    twin: DigitalTwin,
    trace: Trace,
    rules: SafetyRuleSet,
    peer_positions: Optional[PeerPositions] = None,
    config: ComplianceConfig = DEFAULT_CONFIG,
) -> List[TickVerdict]:
    """Physical behaviour against the declared states' safety annotations and the speed ceiling."""
    _check_ids(twin, trace)
    verdicts: List[TickVerdict] = []
    prev: Optional[TelemetryRecord] = None
    for record in trace.records:
        peers = _peers_at(peer_positions, record.tick, trace.drone_id)
        found = check_record_physics(twin, record, prev, rules, peers, config)
        verdicts.append(found or TickVerdict(tick=record.tick, status=TickStatus.CONFORMING))
        prev = record
    return verdicts


def active_predictions(trace: Trace) -> Dict[int, Tuple[int, Vec3]]:
    """Prediction in force for each tick: ``{tick: (issued_tick, position)}``; later broadcasts win."""
    active: Dict[int, Tuple[int, Vec3]] = {}
    for record in trace.records:
        for target_tick, pos in record.broadcast_futures:
            if target_tick > record.tick:
                active[target_tick] = (record.tick, pos)
    return active


def check_prediction_conformance(
    trace: Trace,
    epsilon_m: float = DEFAULT_CONFIG.prediction_epsilon_m,
    rules: Optional[SafetyRuleSet] = None,
) -> List[TickVerdict]:
    """Actual positions against the latest broadcast prediction covering each tick."""
    rules = rules or SafetyRuleSet()
    active = active_predictions(trace)
    hazard_id = _hazard_id(rules, "R-PREDICT")
    verdicts: List[TickVerdict] = []
    for record in trace.records:
        if record.tick not in active:
            verdicts.append(TickVerdict(tick=record.tick, status=TickStatus.CONFORMING))
            continue
        issued, predicted = active[record.tick]
        deviation = kinematics.distance(record.pos, predicted)
        if deviation <= epsilon_m:
            verdicts.append(TickVerdict(tick=record.tick, status=TickStatus.CONFORMING))
            continue
        reached = _tick_reaching(trace, predicted, record.tick, epsilon_m)
        uca = UcaType.WRONG_VALUE.value
        if reached is not None:
            timed = classify_uca("reach_position", "reach_position", record.tick, reached, rules, hazard_id)
            if timed != CONFORMING:
                uca = timed
        verdicts.append(
            TickVerdict(
                tick=record.tick,
                status=TickStatus.PREDICTION_VIOLATION,
                uca_type=uca,
                rule_id="R-PREDICT",
                cause=infer_cause("R-PREDICT", record.events),
                detail=f"deviation {deviation:.3f} m from prediction issued at tick {issued}",
            )
        )
    return verdicts


def _tick_reaching(trace: Trace, point: Vec3, target_tick: int, epsilon_m: float) -> Optional[int]:
    best: Optional[int] = None
    for record in trace.records:
        if kinematics.distance(record.pos, point) > epsilon_m:
            continue
        if best is None or abs(record.tick - target_tick) < abs(best - target_tick):
            best = record.tick
    return best


@dataclass
class _TickFacts:
    declared: bool
    broadcast_due: bool
    broadcast_sent: bool
    announcements_due: int = 0
    announcements_made: int = 0
    due_tokens: List[str] = field(default_factory=list)


def _facts(twin: DigitalTwin, trace: Trace, config: ComplianceConfig) -> List[_TickFacts]:
    period = twin.prediction.broadcast_period_ticks
    first = trace.records[0].tick if trace.records else 0
    facts: List[_TickFacts] = []
    prev: Optional[TelemetryRecord] = None
    for record in trace.records:
        consecutive = _consecutive(prev, record)
        due = intent_due(consecutive.vel if consecutive is not None else None, record.vel, config)
        facts.append(
            _TickFacts(
                declared=record.declared_state is not None,
                broadcast_due=(record.tick - first) % period == 0,
                broadcast_sent=bool(record.broadcast_futures),
                announcements_due=len(due),
                announcements_made=sum(1 for token in due if token in record.events),
                due_tokens=due,
            )
        )
        prev = record
    return facts


def _worst(*verdicts: TickVerdict) -> TickVerdict:
    best = verdicts[0]
    for verdict in verdicts[1:]:
        if STATUS_SEVERITY[verdict.status] > STATUS_SEVERITY[best.status]:
            best = verdict
    return best


def _build_verdict(
    drone_id: str,
    per_tick: Sequence[TickVerdict],
    facts: Sequence[_TickFacts],
) -> ComplianceVerdict:
    summary = {status.value: 0 for status in TickStatus}
    for verdict in per_tick:
        summary[verdict.status.value] += 1
    total = len(per_tick)
    if total == 0:
        return ComplianceVerdict(drone_id=drone_id, honesty=1.0, openness=1.0, summary=summary)

    declared = sum(1 for f in facts if f.declared)
    conforming = summary[TickStatus.CONFORMING.value]
    due = sum(1 for f in facts if f.broadcast_due)
    sent = sum(1 for f in facts if f.broadcast_due and f.broadcast_sent)
    ann_due = sum(f.announcements_due for f in facts)
    ann_made = sum(f.announcements_made for f in facts)

    declared_fraction = declared / total
    broadcast_adherence = sent / due if due else 1.0
    announcement_adherence = ann_made / ann_due if ann_due else 1.0
    honesty = conforming / declared if declared else 0.0
    openness = declared_fraction * broadcast_adherence * announcement_adherence
    return ComplianceVerdict(
        drone_id=drone_id,
        per_tick=tuple(per_tick),
        honesty=min(1.0, max(0.0, honesty)),
        openness=min(1.0, max(0.0, openness)),
        declared_fraction=declared_fraction,
        broadcast_adherence=broadcast_adherence,
        announcement_adherence=announcement_adherence,
        no_declaration=declared == 0,
        summary=summary,
    )


def _per_tick(
    twin: DigitalTwin,
    trace: Trace,
    rules: SafetyRuleSet,
    peer_positions: Optional[PeerPositions],
    config: ComplianceConfig,
) -> List[TickVerdict]:
    states = check_state_conformance(twin, trace, rules, peer_positions, config)
    physics = check_physics_conformance(twin, trace, rules, peer_positions, config)
    predictions = check_prediction_conformance(trace, config.prediction_epsilon_m, rules)
    return [_worst(s, p, q) for s, p, q in zip(states, physics, predictions)]


def assess(
    twin: DigitalTwin,
    trace: Trace,
    rules: SafetyRuleSet,
    peer_positions: Optional[PeerPositions] = None,
    config: ComplianceConfig = DEFAULT_CONFIG,
) -> ComplianceVerdict:
    """
    Full compliance verdict for ``trace`` against ``twin``.

    honesty = conforming ticks / declared ticks (0 with ``no_declaration`` when
    nothing was declared); openness = declared fraction x broadcast adherence
    x announcement adherence. An empty trace scores 1.0 on both.
    """
    _check_ids(twin, trace)
    per_tick = _per_tick(twin, trace, rules, peer_positions, config)
    verdict = _build_verdict(trace.drone_id, per_tick, _facts(twin, trace, config))
    logger.debug(
        f"Assessed {trace.drone_id}: {len(per_tick)} ticks, honesty {verdict.honesty:.3f}, "
        f"openness {verdict.openness:.3f}"
    )
    return verdict


def assess_window(
    twin: DigitalTwin,
    trace: Trace,
    rules: SafetyRuleSet,
    peer_positions: Optional[PeerPositions],
    start: int,
    end: int,
    config: ComplianceConfig = DEFAULT_CONFIG,
) -> ComplianceVerdict:
    """Verdict over ticks ``start..end`` (inclusive), using the trace prefix as context."""
    _check_ids(twin, trace)
    prefix = Trace(drone_id=trace.drone_id, records=tuple(r for r in trace.records if r.tick <= end))
    per_tick = _per_tick(twin, prefix, rules, peer_positions, config)
    facts = _facts(twin, prefix, config)
    keep = [i for i, r in enumerate(prefix.records) if r.tick >= start]
    return _build_verdict(trace.drone_id, [per_tick[i] for i in keep], [facts[i] for i in keep])


def no_twin_verdict(drone_id: str, ticks: Sequence[int]) -> ComplianceVerdict:
    """Verdict for a subject whose twin never arrived: every tick undeclared, nothing open."""
    per_tick = tuple(
        TickVerdict(
            tick=t,
            status=TickStatus.UNDECLARED,
            uca_type=UcaType.OMISSION.value,
            rule_id="R-DECLARE",
            detail="no twin received",
        )
        for t in ticks
    )
    summary = {status.value: 0 for status in TickStatus}
    summary[TickStatus.UNDECLARED.value] = len(per_tick)
    return ComplianceVerdict(
        drone_id=drone_id,
        per_tick=per_tick,
        honesty=0.0,
        openness=0.0,
        declared_fraction=0.0,
        broadcast_adherence=0.0,
        announcement_adherence=0.0,
        no_declaration=True,
        no_twin=True,
        summary=summary,
    )


def has_violations(verdict: ComplianceVerdict) -> bool:
    return verdict.no_declaration or any(v.status != TickStatus.CONFORMING for v in verdict.per_tick)


def has_safety_violation(verdict: ComplianceVerdict) -> bool:
    return any(
        STATUS_SEVERITY[v.status] >= STATUS_SEVERITY[TickStatus.PHYSICS_VIOLATION]
        for v in verdict.per_tick
    )


def dominant_violation(verdict: ComplianceVerdict) -> Optional[TickVerdict]:
    """Earliest tick of the most severe non-conforming status."""
    worst: Optional[TickVerdict] = None
    for v in verdict.per_tick:
        if v.status == TickStatus.CONFORMING:
            continue
        if worst is None or STATUS_SEVERITY[v.status] > STATUS_SEVERITY[worst.status]:
            worst = v
    return worst


def verdict_document(verdict: ComplianceVerdict) -> str:
    return canonical_json(verdict)


def verdict_frame(verdict: ComplianceVerdict) -> pd.DataFrame:
    rows = [
        {
            "tick": v.tick,
            "status": v.status.value,
            "uca_type": v.uca_type or "",
            "rule_id": v.rule_id or "",
            "detail": v.detail or "",
        }
        for v in verdict.per_tick
        if v.status != TickStatus.CONFORMING
    ]
    return pd.DataFrame(rows, columns=["tick", "status", "uca_type", "rule_id", "detail"])


def verdict_table(verdict: ComplianceVerdict) -> str:
    """Aligned human-readable summary of a verdict."""
    header = (
        f"drone {verdict.drone_id}: honesty {verdict.honesty:.3f}  openness {verdict.openness:.3f}"
        + ("  [no-declaration]" if verdict.no_declaration else "")
    )
    counts = "  ".join(f"{k}={v}" for k, v in sorted(verdict.summary.items()))
    frame = verdict_frame(verdict)
    body = "all ticks conforming" if frame.empty else frame.to_string(index=False)
    return f"{header}\n{counts}\n{body}\n"


@dataclass(frozen=True)
class AssessmentJob:
    """One observer's assessment of one subject over one evaluation window.

    Jobs hold immutable inputs only, so distinct jobs may run on worker threads.
    ``twin`` is ``None`` when the observer never received the subject's twin.
    """

    observer_id: str
    subject_id: str
    start: int
    end: int
    twin: Optional[DigitalTwin]
    trace: Trace
    peer_positions: Mapping[int, Mapping[str, Vec3]]
    ticks: Tuple[int, ...] = ()

    def run(self, rules: SafetyRuleSet, config: ComplianceConfig = DEFAULT_CONFIG) -> ComplianceVerdict:
        if self.twin is None:
            return no_twin_verdict(self.subject_id, self.ticks)
        return assess_window(
            self.twin, self.trace, rules, self.peer_positions, self.start, self.end, config
        )
