"""FSM-based Digital Twin: canonical automaton, validation, stepping, prediction and codec."""
import logging
from collections import defaultdict, deque
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from twin_trust.app.errors import ParseError, TwinValidationError, UnknownStateError
from twin_trust.app.schemas import (
    GUARD_COMPLEMENTS,
    DigitalTwin,
    FsmSpec,
    FsmState,
    FsmTransition,
    FsmViolation,
    Guard,
    PredictionModel,
    PredictionParams,
    SafetyRuleSet,
    StateCategory,
    StaticAttributes,
    ValidationReport,
    Vec3,
)
from twin_trust.services import kinematics
from twin_trust.services.utils.file_parser import (
    canonical_json,
    model_from_data,
    parse_json_text,
    read_text,
    write_text,
)

logger = logging.getLogger(__name__)

NO_TRANSITION = "no-transition"
DT_VERSION = "1.0"

GuardEnv = Mapping[Union[Guard, str], bool]

# id, name, category, safety annotations
CANONICAL_STATES: List[Tuple[str, str, StateCategory, Tuple[str, ...]]] = [
    ("S1", "Accelerate to Start", StateCategory.MOTION, ()),
    ("S2", "Air Trajectory Planner Updates", StateCategory.SIGNALING, ()),
    ("S3", "Flight Navigation Updates", StateCategory.MOTION, ()),
    ("S4", "Decelerate to Stop", StateCategory.TERMINAL, ("R-STOP",)),
    ("S5", "Object Detection", StateCategory.PERCEPTION, ()),
    ("S6", "Contingency Plan", StateCategory.MOTION, ()),
    ("S7", "Lane Changing", StateCategory.LANE_CONTROL, ()),
    ("S8", "Drone Signal Interface", StateCategory.SIGNALING, ()),
    ("S9", "Speed Information", StateCategory.SPEED_CONTROL, ()),
    ("S10", "Lane Keeping Information", StateCategory.LANE_CONTROL, ()),
    ("S11", "Stop Information", StateCategory.BRAKING, ()),
    ("S12", "Right Turn", StateCategory.LANE_CONTROL, ()),
    ("S13", "Left Turn", StateCategory.LANE_CONTROL, ()),
    ("S14", "Level Changing", StateCategory.LANE_CONTROL, ()),
    ("S15", "Environmental Issue", StateCategory.ENVIRONMENT, ()),
    ("S16", "Brake", StateCategory.BRAKING, ("R-BRAKE",)),
    ("S17", "Light Brake", StateCategory.BRAKING, ("R-BRAKE",)),
    ("S18", "Strong Brake", StateCategory.BRAKING, ("R-BRAKE",)),
    ("S19", "Emergency Brake", StateCategory.BRAKING, ("R-BRAKE",)),
    ("S20", "Maintain the Distance", StateCategory.SPEED_CONTROL, ("R-SEP",)),
    ("S21", "Speed Keeping", StateCategory.SPEED_CONTROL, ("R-KEEP",)),
    ("S22", "Accelerate the Speed", StateCategory.SPEED_CONTROL, ("R-ACCEL",)),
    ("S23", "Decelerate the Speed", StateCategory.SPEED_CONTROL, ("R-DECEL",)),
]

# from, trigger, to. S4's exit to the end state is the mission_end self-loop.
CANONICAL_TRANSITIONS: List[Tuple[str, str, str]] = [
    ("S1", "power_on", "S2"),
    ("S2", "moving_forward", "S3"),
    ("S3", "object_detected", "S5"),
    ("S3", "route_clear", "S8"),
    ("S4", "cleared", "S1"),
    ("S4", "mission_end", "S4"),
    ("S5", "object_persists_long", "S4"),
    ("S5", "mission_end", "S4"),
    ("S5", "avoidance_possible", "S6"),
    ("S5", "object_still_present", "S7"),
    ("S6", "plan_followed", "S3"),
    ("S7", "normal_flow", "S3"),
    ("S8", "speed_request", "S9"),
    ("S8", "lane_request", "S10"),
    ("S8", "stop_request", "S11"),
    ("S8", "data_needed", "S3"),
    ("S9", "maintain_distance", "S20"),
    ("S9", "keep_speed", "S21"),
    ("S9", "accelerate", "S22"),
    ("S9", "decelerate", "S23"),
    ("S9", "return", "S8"),
    ("S10", "turn_right", "S12"),
    ("S10", "turn_left", "S13"),
    ("S10", "change_level", "S14"),
    ("S10", "return", "S8"),
    ("S11", "stop_advised", "S16"),
    ("S11", "environment_issue", "S15"),
    ("S11", "return", "S8"),
    ("S12", "turn_again", "S10"),
    ("S13", "turn_again", "S10"),
    ("S14", "direction_change", "S10"),
    ("S15", "issue_severe", "S11"),
    ("S16", "light", "S17"),
    ("S16", "strong", "S18"),
    ("S16", "emergency", "S19"),
    ("S16", "return", "S11"),
    ("S17", "obstacle", "S16"),
    ("S18", "stopped", "S16"),
    ("S19", "handled", "S16"),
    ("S20", "separation_restored", "S9"),
    ("S21", "conflict", "S9"),
    ("S22", "conflict", "S9"),
    ("S23", "hazard_cleared", "S9"),
]


def canonical_fsm() -> FsmSpec:
    """The 23-state drone automaton with S1 initial and S4 terminal."""
    return FsmSpec(
        initial="S1",
        terminal=("S4",),
        states=tuple(
            FsmState(id=sid, name=name, category=category, safety_annotations=notes)
            for sid, name, category, notes in CANONICAL_STATES
        ),
        transitions=tuple(
            FsmTransition(source=src, trigger=trigger, target=dst)
            for src, trigger, dst in CANONICAL_TRANSITIONS
        ),
    )


def canonical_twin(
    drone_id: str,
    attrs: StaticAttributes,
    mission: Sequence[Vec3],
    prediction: Optional[PredictionParams] = None,
) -> DigitalTwin:
    return DigitalTwin(
        dt_version=DT_VERSION,
        drone_id=drone_id,
        attrs=attrs,
        fsm=canonical_fsm(),
        mission=tuple(tuple(float(c) for c in w) for w in mission),
        prediction=prediction or PredictionParams(),
    )


def _guards_overlap(a: Optional[Guard], b: Optional[Guard]) -> bool:
    if a is None or b is None:
        # An unguarded edge is the fallback for guarded ones; two unguarded ones clash.
        return a is None and b is None
    return GUARD_COMPLEMENTS.get(a) != b


def validate_fsm(spec: FsmSpec) -> ValidationReport:
    """Report every structural problem of ``spec``; an empty report means valid."""
    violations: List[FsmViolation] = []
    known: Set[str] = set()
    for state in spec.states:
        if state.id in known:
            violations.append(
                FsmViolation(kind="duplicate_state", message=f"state {state.id} is defined twice",
                             ref=state.id)
            )
        known.add(state.id)

    if spec.initial not in known:
        violations.append(
            FsmViolation(kind="unknown_state", message=f"initial state {spec.initial} is unknown",
                         ref=spec.initial)
        )
    for terminal in spec.terminal:
        if terminal not in known:
            violations.append(
                FsmViolation(kind="unknown_state", message=f"terminal state {terminal} is unknown",
                             ref=terminal)
            )

    valid_edges: List[FsmTransition] = []
    for t in spec.transitions:
        broken = [ref for ref in (t.source, t.target) if ref not in known]
        for ref in broken:
            violations.append(
                FsmViolation(
                    kind="unknown_state",
                    message=f"transition {t.source}->{t.target} ({t.trigger}) references unknown state {ref}",
                    ref=ref,
                )
            )
        if not broken:
            valid_edges.append(t)

    groups: Dict[Tuple[str, str], List[FsmTransition]] = defaultdict(list)
    for t in spec.transitions:
        groups[(t.source, t.trigger)].append(t)
    for (source, trigger), edges in groups.items():
        clash = any(
            _guards_overlap(edges[i].guard, edges[j].guard)
            for i in range(len(edges))
            for j in range(i + 1, len(edges))
        )
        if clash:
            violations.append(
                FsmViolation(
                    kind="nondeterministic",
                    message=f"state {source} has overlapping transitions on '{trigger}'",
                    ref=source,
                )
            )

    outgoing = {t.source for t in valid_edges}
    for state in spec.states:
        if state.id not in spec.terminal and state.id not in outgoing:
            violations.append(
                FsmViolation(kind="dead_state",
                             message=f"non-terminal state {state.id} has no outgoing transition",
                             ref=state.id)
            )

    if spec.initial in known:
        reached = _reach(spec.initial, valid_edges)
        for state in spec.states:
            if state.id not in reached:
                violations.append(
                    FsmViolation(kind="unreachable_state",
                                 message=f"state {state.id} is unreachable from {spec.initial}",
                                 ref=state.id)
                )

    return ValidationReport(violations=tuple(violations))


def validate_annotations(spec: FsmSpec, rules: SafetyRuleSet) -> ValidationReport:
    """Report safety annotations that name no rule of ``rules``."""
    known = set(rules.rule_ids)
    violations = [
        FsmViolation(
            kind="unknown_annotation",
            message=f"state {state.id} is annotated with unknown rule {note}",
            ref=note,
        )
        for state in spec.states
        for note in state.safety_annotations
        if note not in known
    ]
    return ValidationReport(violations=tuple(violations))


def _reach(source: str, edges: Iterable[FsmTransition]) -> Set[str]:
    adjacency: Dict[str, List[str]] = defaultdict(list)
    for t in edges:
        adjacency[t.source].append(t.target)
    seen = {source}
    queue = deque([source])
    while queue:
        node = queue.popleft()
        for nxt in adjacency[node]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def reachable_states(spec: FsmSpec, source: str) -> Set[str]:
    if spec.get_state(source) is None:
        raise UnknownStateError(source)
    return _reach(source, spec.transitions)


def _guard_holds(guard: Guard, guard_env: Optional[GuardEnv]) -> bool:
    if not guard_env:
        return False
    if guard in guard_env:
        return bool(guard_env[guard])
    return bool(guard_env.get(guard.value, False))


def step_fsm(
    spec: FsmSpec,
    current: str,
    event: str,
    guard_env: Optional[GuardEnv] = None,
) -> str:
    """Successor of ``current`` on ``event``; guarded matches win over the unguarded edge."""
    if spec.get_state(current) is None:
        raise UnknownStateError(current)
    fallback: Optional[str] = None
    for t in spec.transitions:
        if t.source != current or t.trigger != event:
            continue
        if t.guard is None:
            fallback = t.target if fallback is None else fallback
        elif _guard_holds(t.guard, guard_env):
            return t.target
    return fallback if fallback is not None else NO_TRANSITION


def apply_events(
    spec: FsmSpec,
    current: str,
    events: Sequence[str],
    guard_env: Optional[GuardEnv] = None,
) -> str:
    """Fold ``step_fsm`` over one tick's events, skipping events with no matching edge."""
    state = current
    for event in events:
        nxt = step_fsm(spec, state, event, guard_env)
        if nxt != NO_TRANSITION:
            state = nxt
    return state


def predict_trajectory(
    twin: DigitalTwin,
    pos: Sequence[float],
    vel: Sequence[float],
    acc: Sequence[float],
    now: int,
    waypoint_index: int = 0,
    mission: Optional[Sequence[Vec3]] = None,
    turn_rate_deg: float = 15.0,
    arrival_radius_m: float = 2.0,
) -> List[Tuple[int, Vec3]]:
    """Future positions for ticks ``now+1 .. now+horizon`` under the twin's prediction model."""
    route = tuple(mission) if mission is not None else twin.mission
    cap = twin.attrs.max_speed_mps
    model_acc = (
        kinematics.as_array(acc)
        if twin.prediction.model == PredictionModel.CONSTANT_ACCELERATION
        else kinematics.as_array((0.0, 0.0, 0.0))
    )
    p = kinematics.as_array(pos)
    v = kinematics.clamp_speed(kinematics.as_array(vel), cap)
    index = waypoint_index
    futures: List[Tuple[int, Vec3]] = []
    for k in range(1, twin.prediction.horizon_ticks + 1):
        p, v, index = kinematics.integrate_step(
            p, v, model_acc, route, index, cap, turn_rate_deg, arrival_radius_m
        )
        futures.append((now + k, kinematics.as_vec(p)))
    return futures


def serialize_twin(twin: DigitalTwin) -> str:
    """Canonical JSON document: sorted keys, six-decimal floats, byte-deterministic."""
    return canonical_json(twin)


def deserialize_twin(document: Union[str, bytes], source: str = "") -> DigitalTwin:
    """Parse a twin document.

    Raises:
        ParseError: malformed JSON (line:col) or schema mismatch (dotted field path).
        TwinValidationError: the FSM fails ``validate_fsm``.
    """
    if isinstance(document, bytes):
        document = document.decode("utf-8")
    data = parse_json_text(document, source or "<twin>")
    if not isinstance(data, dict):
        raise ParseError(source or "<root>", "twin document must be a JSON object")
    twin: DigitalTwin = model_from_data(DigitalTwin, data, source)
    report = validate_fsm(twin.fsm)
    if not report.valid:
        raise TwinValidationError(report)
    return twin


def load_twin(path: Union[str, Path]) -> DigitalTwin:
    return deserialize_twin(read_text(path), str(path))


def save_twin(twin: DigitalTwin, path: Union[str, Path]) -> None:
    write_text(path, serialize_twin(twin))
    logger.debug(f"Twin for {twin.drone_id} written to {path}")
