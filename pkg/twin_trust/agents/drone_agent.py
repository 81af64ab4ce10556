import logging
import math
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from twin_trust.agents.base_agent import ObserverAgent
from twin_trust.app.schemas import (
    AgentConfig,
    Behavior,
    Cause,
    ComplianceConfig,
    Countermeasure,
    DeviationKind,
    DeviationOverride,
    DroneConditions,
    PlanAck,
    PlanDispatch,
    SafetyRuleSet,
    SimConfig,
    SimState,
    TelemetryRecord,
    TrustConfig,
    Vec3,
)
from twin_trust.services import kinematics
from twin_trust.services.compliance import (
    SIGNAL_INTERFERENCE,
    WEATHER_SEVERE,
    check_record_physics,
    intent_due,
    observed_motion,
)
from twin_trust.services.dt_model import canonical_twin, predict_trajectory, serialize_twin
from twin_trust.services.route_planner import fsm_route_planner
from twin_trust.services.safety_engine import required_separation
from twin_trust.services.utils.file_parser import quantize

logger = logging.getLogger(__name__)

# States in which the autopilot does not move the drone.
STATIONARY_STATES = {"S1", "S2", "S4"}
FALLBACK_STATE = "S3"
SPEED_DEADBAND = 1e-6


def _quantized(vec: Sequence[float]) -> np.ndarray:
    return np.array([quantize(float(c)) for c in vec])


def _unit(vec: np.ndarray) -> Optional[np.ndarray]:
    norm = float(np.linalg.norm(vec))
    if norm < kinematics.ZERO_NORM:
        return None
    return vec / norm


class DroneAgent(ObserverAgent):
    """
    A simulated drone. It flies its mission, declares the canonical twin state
    matching its motion, broadcasts telemetry and predicted positions, checks
    its peers and reacts to trust decisions and dispatched recovery plans.

    Deviant drones follow their deviation script while an override is active and
    ignore countermeasures and plans for that time.
    """

    def __init__(
        self,
        config: AgentConfig,
        rules: SafetyRuleSet,
        compliance: ComplianceConfig,
        trust: TrustConfig,
        sim: SimConfig,
        orchestrator_id: Optional[str] = None,
    ):
        super().__init__(config.drone_id, rules, compliance, trust, orchestrator_id)
        self.config = config
        self.sim = sim
        self.twin = canonical_twin(config.drone_id, config.attrs, config.mission, config.prediction)
        self.mission: List[Vec3] = list(self.twin.mission)
        self.waypoint_index = 0
        self.pos = _quantized(config.start)
        self.vel = np.zeros(3)
        self.acc = np.zeros(3)
        self.fsm_state = self.twin.fsm.initial
        self.records: List[TelemetryRecord] = []
        self.prediction: Dict[int, Vec3] = {}
        self.plans: List[PlanDispatch] = []
        self.planner = fsm_route_planner
        self._applied_reroutes: Set[Tuple] = set()
        self._measures: Dict[Countermeasure, Optional[str]] = {}
        self._holding = False
        self._transient_object = False
        self._reroute_now = False
        self._interference = False

    @property
    def drone_id(self) -> str:
        return self.config.drone_id

    def own_records(self) -> Sequence[TelemetryRecord]:
        return self.records

    def process(self, state: SimState) -> SimState:
        handlers = {
            "kinematics": self.step_kinematics,
            "declare": self.declare,
            "react": self.react,
        }
        handler = handlers.get(state.phase)
        if handler is not None:
            handler(state)
        return state

    def deviation(self, tick: int) -> Optional[DeviationOverride]:
        if self.config.behavior != Behavior.DEVIANT:
            return None
        return self.config.script.active(tick)

    def _deviating(self, tick: int, kind: DeviationKind) -> bool:
        override = self.deviation(tick)
        return override is not None and override.kind == kind

    def share_twin(self, tick: int) -> Optional[str]:
        """Twin document offered to peers, or ``None`` while refusing to share."""
        if self._deviating(tick, DeviationKind.SILENT):
            return None
        return serialize_twin(self.twin)

    def initialize(self, state: SimState) -> None:
        state.positions[self.drone_id] = kinematics.as_vec(self.pos)

    # -- kinematics -------------------------------------------------------

    def step_kinematics(self, state: SimState) -> None:
        tick = state.tick
        conditions = state.conditions.get(self.drone_id, DroneConditions())
        override = self.deviation(tick)
        projected = self._projected_peers(state)
        required = required_separation(self.rules, conditions.weather_severe)
        p_next = self.pos + self.vel

        measures = self._active_measures(tick, p_next, projected, required) if override is None else {}
        if measures != self._measures and measures:
            summary = ", ".join(f"{m.value}:{threat or '-'}" for m, threat in sorted(measures.items()))
            self.log_interaction(state, "Countermeasures", f"applying {summary}")
        self._measures = measures
        self._reroute_now = self._apply_reroute(tick, measures)

        reach = max(self.sim.arrival_radius_m, kinematics.speed_of(self.vel))
        index_next = kinematics.advance_waypoints(p_next, self.mission, self.waypoint_index, reach)
        mission_done = index_next >= len(self.mission)
        self._transient_object = conditions.object_kind == "transient"
        self._holding = (
            mission_done
            or conditions.object_kind == "persistent"
            or Countermeasure.STOP in measures
        )

        velocity_override = self._velocity_override(override, measures, p_next, projected, required)
        if self.fsm_state in STATIONARY_STATES and velocity_override is None:
            self.pos = _quantized(p_next)
            self.vel = np.zeros(3)
            self.acc = np.zeros(3)
        else:
            cap = self.twin.attrs.max_speed_mps
            if override is not None and override.speed_mps is not None:
                cap = max(cap, override.speed_mps)
            acc = self._autopilot_acceleration(
                conditions, override, measures, p_next, index_next, mission_done
            )
            p1, v1, self.waypoint_index = kinematics.integrate_step(
                self.pos, self.vel, acc, self.mission, self.waypoint_index, cap,
                self.sim.turn_rate_deg, self.sim.arrival_radius_m, velocity_override,
            )
            self.pos, self.vel, self.acc = _quantized(p1), _quantized(v1), acc
        state.positions[self.drone_id] = kinematics.as_vec(self.pos)

    def _projected_peers(self, state: SimState) -> Dict[str, np.ndarray]:
        """Peers' positions for this tick, from their last records."""
        return {
            drone_id: kinematics.as_array(record.pos) + kinematics.as_array(record.vel)
            for drone_id, record in sorted(state.records.items())
            if drone_id != self.drone_id
        }

    def _active_measures(
        self,
        tick: int,
        p_next: np.ndarray,
        projected: Dict[str, np.ndarray],
        required: float,
    ) -> Dict[Countermeasure, Optional[str]]:
        """Countermeasure -> threatening drone, from trust decisions and dispatched plans."""
        measures: Dict[Countermeasure, Optional[str]] = {}
        reaction_range = self.sim.avoid_clearance_factor * required
        for subject_id in sorted(self.untrusted_subjects()):
            threat = projected.get(subject_id)
            if threat is None or kinematics.distance(p_next, threat) >= reaction_range:
                continue
            # Avoidance holds whatever rule dominated the last window.
            measures.setdefault(Countermeasure.AVOID, subject_id)
            for measure in self.ledger.subjects[subject_id].countermeasures:
                measures.setdefault(measure, subject_id)
        for plan in self.plans:
            if not plan.dispatch_tick <= tick <= plan.deadline_tick:
                continue
            threat_id = plan.threat_id if plan.subject_id == self.drone_id else plan.subject_id
            for measure in plan.plan.actions:
                measures.setdefault(measure, threat_id)
        return measures

    def _apply_reroute(self, tick: int, measures: Dict[Countermeasure, Optional[str]]) -> bool:
        if Countermeasure.REROUTE not in measures:
            return False
        key = self._reroute_key(tick, measures[Countermeasure.REROUTE])
        if key in self._applied_reroutes:
            return False
        self._applied_reroutes.add(key)
        lift = self.sim.reroute_altitude_m
        for i in range(self.waypoint_index, len(self.mission)):
            x, y, z = self.mission[i]
            self.mission[i] = (x, y, z + lift)
        self.logger.info(f"{self.drone_id}: rerouted {len(self.mission) - self.waypoint_index} waypoints by {lift} m")
        return True

    def _reroute_key(self, tick: int, threat_id: Optional[str]) -> Tuple:
        for plan in self.plans:
            if plan.dispatch_tick <= tick <= plan.deadline_tick and Countermeasure.REROUTE in plan.plan.actions:
                return ("plan", plan.subject_id, plan.rule_id, plan.dispatch_tick)
        return ("trust", threat_id)

    def _velocity_override(
        self,
        override: Optional[DeviationOverride],
        measures: Dict[Countermeasure, Optional[str]],
        p_next: np.ndarray,
        projected: Dict[str, np.ndarray],
        required: float,
    ) -> Optional[np.ndarray]:
        if override is not None and override.kind == DeviationKind.IGNORE_SEPARATION:
            return self._pursuit_velocity(override, p_next, projected)
        threat_id = measures.get(Countermeasure.AVOID)
        if threat_id is None or threat_id not in projected:
            return None
        threat = projected[threat_id]
        if kinematics.distance(p_next, threat) >= self.sim.avoid_clearance_factor * required:
            return None
        away = p_next - threat
        away[2] = 0.0
        direction = _unit(away)
        if direction is None:
            direction = np.array([1.0, 0.0, 0.0])
        vz = float(self.vel[2])
        horizontal = math.sqrt(max(self.twin.attrs.max_speed_mps ** 2 - vz ** 2, 0.0))
        return np.array([direction[0] * horizontal, direction[1] * horizontal, vz])

    def _pursuit_velocity(
        self,
        override: DeviationOverride,
        p_next: np.ndarray,
        projected: Dict[str, np.ndarray],
    ) -> Optional[np.ndarray]:
        if not projected:
            return None
        target_id = min(projected, key=lambda pid: (kinematics.distance(p_next, projected[pid]), pid))
        offset = projected[target_id] - p_next
        gap = float(np.linalg.norm(offset))
        speed = override.speed_mps or self.config.cruise_speed_mps
        if gap < kinematics.ZERO_NORM:
            return np.zeros(3)
        return offset * (min(speed, gap) / gap)

    def _autopilot_acceleration(
        self,
        conditions: DroneConditions,
        override: Optional[DeviationOverride],
        measures: Dict[Countermeasure, Optional[str]],
        p_next: np.ndarray,
        index_next: int,
        mission_done: bool,
    ) -> np.ndarray:
        """Acceleration toward the desired speed along the current heading."""
        a_max = self.sim.accel_limit_mps2
        cruise = self.config.cruise_speed_mps
        limit = cruise
        if conditions.weather_severe or Countermeasure.MINIMIZE_SPEED in measures:
            limit = min(limit, self.sim.reduced_speed_factor * cruise)
        if override is not None and override.kind == DeviationKind.SPEED_BURST:
            limit = override.speed_mps

        if self._holding:
            desired = 0.0
        else:
            remaining = kinematics.remaining_path_length(p_next, self.mission, index_next)
            desired = min(limit, math.sqrt(2.0 * a_max * remaining))

        speed = kinematics.speed_of(self.vel)
        heading = _unit(self.vel)
        if heading is None:
            if mission_done:
                return np.zeros(3)
            heading = _unit(kinematics.as_array(self.mission[index_next]) - p_next)
            if heading is None:
                return np.zeros(3)
        delta = desired - speed
        if abs(delta) < SPEED_DEADBAND:
            return np.zeros(3)
        return heading * float(np.clip(delta, -a_max, a_max))

    # -- declaration and broadcast ------------------------------------------

    def declare(self, state: SimState) -> None:
        tick = state.tick
        conditions = state.conditions.get(self.drone_id, DroneConditions())
        override = self.deviation(tick)
        silent = override is not None and override.kind == DeviationKind.SILENT
        prev = self.records[-1] if self.records else None
        peers = sorted((pid, pos) for pid, pos in state.positions.items() if pid != self.drone_id)
        pos, vel = kinematics.as_vec(self.pos), kinematics.as_vec(self.vel)

        info: List[str] = []
        if conditions.weather_severe:
            info.append(WEATHER_SEVERE)
        if conditions.signal_interference:
            info.append(SIGNAL_INTERFERENCE)
        consecutive = prev if prev is not None and prev.tick == tick - 1 else None
        info.extend(intent_due(consecutive.vel if consecutive else None, vel, self.compliance))

        if prev is None:
            target, route = self.fsm_state, []
        else:
            target, route = self._select_state(tick, prev, peers, info, conditions, override)

        declared: Optional[str] = target
        events = tuple(info + route)
        if override is not None and override.kind == DeviationKind.WRONG_STATE:
            declared = override.state_id
        if silent:
            declared, events = None, ()

        record = TelemetryRecord(
            tick=tick,
            drone_id=self.drone_id,
            pos=pos,
            vel=vel,
            declared_state=declared,
            events=events,
            broadcast_futures=self._broadcast(tick, override),
        )
        self.fsm_state = target
        self.records.append(record)
        state.records[self.drone_id] = record

        if conditions.signal_interference and not self._interference and not silent:
            self.report_violation(state, self.drone_id, "R-SIGNAL", Cause.CONNECTION_PROBLEM, tick)
            self.log_interaction(state, "Interference reported", "signal interference reported to orchestrator")
        self._interference = conditions.signal_interference

    def _candidates(
        self,
        prev: TelemetryRecord,
        peers: Sequence[Tuple[str, Vec3]],
        conditions: DroneConditions,
    ) -> List[str]:
        """Target states in priority order for the current situation."""
        current = self.fsm_state
        moving = kinematics.speed_of(self.vel) > self.compliance.stop_epsilon_mps
        if current == "S1" and not moving:
            return ["S2"]
        if current == "S2" and not moving:
            return ["S3"]
        if current == "S4" and not moving:
            return ["S4"] if self._holding else ["S1"]

        candidates: List[str] = []
        if self._transient_object:
            candidates.append("S6")
        if self._reroute_now:
            candidates.append("S14")
        if self._holding:
            candidates.extend(["S4", "S18"])
        awareness = self.sim.awareness_factor * required_separation(self.rules, conditions.weather_severe)
        if any(kinematics.distance(self.pos, pos) < awareness for _, pos in peers):
            candidates.append("S20")

        prev_speed, speed = kinematics.speed_of(prev.vel), kinematics.speed_of(self.vel)
        stop_eps = self.compliance.stop_epsilon_mps
        if (
            prev_speed > stop_eps
            and speed > stop_eps
            and kinematics.heading_change_deg(prev.vel, self.vel) > self.compliance.turn_announce_deg
        ):
            turn = kinematics.turn_direction(prev.vel, self.vel)
            candidates.append({1: "S13", -1: "S12"}.get(turn, "S14"))

        motion = observed_motion(prev_speed, speed, self.compliance)
        if motion == "accelerate":
            candidates.extend(["S22", "S21", "S23"])
        elif motion == "decelerate":
            candidates.extend(["S23", "S21", "S22"])
        else:
            candidates.extend(["S21", "S22", "S23"])
        return candidates

    def _select_state(
        self,
        tick: int,
        prev: TelemetryRecord,
        peers: Sequence[Tuple[str, Vec3]],
        info: List[str],
        conditions: DroneConditions,
        override: Optional[DeviationOverride],
    ) -> Tuple[str, List[str]]:
        """First candidate state the twin can reach whose safety annotations the motion satisfies."""
        fsm = self.twin.fsm
        if override is not None and override.kind == DeviationKind.IGNORE_SEPARATION:
            route = self.planner.plan_route(fsm, self.fsm_state, "S20")
            if route is not None:
                return "S20", route

        for candidate in self._candidates(prev, peers, conditions):
            route = self.planner.plan_route(fsm, self.fsm_state, candidate)
            if route is None:
                continue
            probe = TelemetryRecord(
                tick=tick,
                drone_id=self.drone_id,
                pos=kinematics.as_vec(self.pos),
                vel=kinematics.as_vec(self.vel),
                declared_state=candidate,
                events=tuple(info + route),
            )
            if check_record_physics(self.twin, probe, prev, self.rules, peers, self.compliance) is None:
                return candidate, route
        route = self.planner.plan_route(fsm, self.fsm_state, FALLBACK_STATE)
        if route is None:
            return self.fsm_state, []
        return FALLBACK_STATE, route

    def _broadcast(self, tick: int, override: Optional[DeviationOverride]) -> Tuple[Tuple[int, Vec3], ...]:
        """
        Future positions broadcast this tick.

        Honest drones broadcast every period tick, and again whenever the
        prediction in force for the next tick has drifted from where the drone
        will actually be.
        """
        if override is not None and override.kind == DeviationKind.SILENT:
            return ()
        due = tick % self.twin.prediction.broadcast_period_ticks == 0
        if override is not None and override.kind == DeviationKind.FALSE_PREDICTION:
            if not due:
                return ()
            shift = np.array([0.0, float(override.offset_m), 0.0])
            return tuple(
                (t, kinematics.as_vec(_quantized(kinematics.as_array(p) + shift)))
                for t, p in self._predict(tick)
            )

        in_force = self.prediction.get(tick + 1)
        drifted = in_force is None or (
            kinematics.distance(in_force, self.pos + self.vel) > self.sim.rebroadcast_tolerance_m
        )
        if not (due or drifted):
            return ()
        futures = tuple((t, kinematics.as_vec(_quantized(p))) for t, p in self._predict(tick))
        self.prediction = {t: p for t, p in self.prediction.items() if t > tick}
        self.prediction.update(dict(futures))
        return futures

    def _predict(self, tick: int) -> List[Tuple[int, Vec3]]:
        return predict_trajectory(
            self.twin, self.pos, self.vel, self.acc, tick,
            waypoint_index=self.waypoint_index,
            mission=self.mission,
            turn_rate_deg=self.sim.turn_rate_deg,
            arrival_radius_m=self.sim.arrival_radius_m,
        )

    # -- recovery plans -------------------------------------------------------

    def react(self, state: SimState) -> None:
        """Acknowledge dispatched plans; deviants decline while their script is active."""
        tick = state.tick
        for plan in state.plan_inbox.get(self.drone_id, []):
            applied = self.deviation(tick) is None
            if applied:
                self.plans.append(plan)
            state.ack_inbox.append(
                PlanAck(
                    drone_id=self.drone_id,
                    subject_id=plan.subject_id,
                    rule_id=plan.rule_id,
                    plan_id=plan.plan.id,
                    tick=tick,
                    applied=applied,
                )
            )
            self.log_interaction(
                state,
                "Plan applied" if applied else "Plan ignored",
                f"{plan.plan.id} for {plan.subject_id}/{plan.rule_id} until tick {plan.deadline_tick}",
            )
        self.plans = [p for p in self.plans if p.deadline_tick >= tick]
