"""Deterministic tick loop that runs drones and the optional orchestrator over a scenario."""
import asyncio
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from twin_trust.agents.base_agent import BaseAgent, ObserverAgent
from twin_trust.agents.drone_agent import DroneAgent
from twin_trust.agents.orchestrator_agent import OrchestratorAgent
from twin_trust.app.errors import InvalidScenarioError, ParseError, SimulationError
from twin_trust.app.schemas import (
    Behavior,
    ComplianceConfig,
    ComplianceVerdict,
    DeviationKind,
    DroneConditions,
    ResolvedConfig,
    SafetyRuleSet,
    Scenario,
    SimState,
    SimulationResult,
    Trace,
)
from twin_trust.services.compliance import AssessmentJob, assess, peer_positions_from_traces
from twin_trust.services.dt_model import canonical_fsm, validate_fsm
from twin_trust.services.safety_engine import load_ruleset, resolve_catalog_path
from twin_trust.services.settings import resolve_config
from twin_trust.services.trust_engine import export_ledger
from twin_trust.services.utils.file_parser import load_json, model_from_data
from twin_trust.services.utils.state import clear_tick_inboxes, create_initial_state

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def load_scenario(path: PathLike) -> Scenario:
    """
    Read a scenario file.

    Raises:
        FileNotFoundError: the file does not exist.
        ParseError: the file is not JSON or does not match the scenario schema.
    """
    return model_from_data(Scenario, load_json(path), str(path))


def validate_scenario(scenario: Scenario) -> List[str]:
    """Every problem that keeps ``scenario`` from running, empty when it is valid."""
    problems: List[str] = []
    ids = [d.drone_id for d in scenario.drones]
    known = set(ids)
    state_ids = set(canonical_fsm().state_ids())

    if not ids:
        problems.append("scenario has no drones")
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        problems.append(f"duplicate drone ids: {', '.join(duplicates)}")
    if scenario.orchestrator is not None and scenario.orchestrator.id in known:
        problems.append(f"orchestrator id '{scenario.orchestrator.id}' collides with a drone id")

    for drone in scenario.drones:
        where = f"drone '{drone.drone_id}'"
        if drone.cruise_speed_mps > drone.attrs.max_speed_mps:
            problems.append(
                f"{where}: cruise speed {drone.cruise_speed_mps} exceeds declared max {drone.attrs.max_speed_mps}"
            )
        if drone.script.overrides and drone.behavior != Behavior.DEVIANT:
            problems.append(f"{where}: deviation script on an honest drone")
        for override in drone.script.overrides:
            if override.end_tick >= scenario.ticks:
                problems.append(
                    f"{where}: {override.kind.value} override [{override.start_tick}, {override.end_tick}] "
                    f"runs past the last tick {scenario.ticks - 1}"
                )
            if override.kind == DeviationKind.WRONG_STATE and override.state_id not in state_ids:
                problems.append(f"{where}: wrong_state names unknown state '{override.state_id}'")

    events = scenario.events
    for obj in events.objects:
        if obj.drone_id not in known:
            problems.append(f"object event at tick {obj.tick} names unknown drone '{obj.drone_id}'")
        if obj.tick >= max(scenario.ticks, 1):
            problems.append(f"object event at tick {obj.tick} lies outside the scenario")
    intervals_by_label = (
        ("weather_severe", events.weather_severe),
        ("signal_interference", events.signal_interference),
    )
    for label, intervals in intervals_by_label:
        for interval in intervals:
            if interval.end_tick < interval.start_tick:
                problems.append(f"{label} interval [{interval.start_tick}, {interval.end_tick}] is reversed")
            for drone_id in interval.drone_ids or ():
                if drone_id not in known:
                    problems.append(f"{label} interval names unknown drone '{drone_id}'")

    if scenario.sim.rebroadcast_tolerance_m >= scenario.compliance.prediction_epsilon_m:
        problems.append(
            f"rebroadcast tolerance {scenario.sim.rebroadcast_tolerance_m} m must stay below the "
            f"prediction epsilon {scenario.compliance.prediction_epsilon_m} m"
        )
    return problems


def load_scenario_rules(config: ResolvedConfig, base_dir: Optional[Path] = None) -> SafetyRuleSet:
    """Compile the catalog a scenario refers to; a missing file makes the scenario invalid."""
    path = resolve_catalog_path(config.rules_catalog, base_dir)
    try:
        return load_ruleset(config.rules_catalog, base_dir)
    except FileNotFoundError as e:
        raise InvalidScenarioError([f"rules catalog not found: {path}"]) from e


class SwarmSimulator:
    """
    One run of a scenario. All agents share a ``SimState`` blackboard; each
    tick goes through fixed phases and the order of agents within a phase is
    the sorted drone id order, so a run depends on nothing but its inputs.
    """

    def __init__(self, scenario: Scenario, rules: SafetyRuleSet, config: ResolvedConfig):
        self.scenario = scenario
        self.rules = rules
        self.config = config
        self.window = config.eval_window_ticks
        self.compliance: ComplianceConfig = config.compliance
        orchestrator_id = scenario.orchestrator.id if scenario.orchestrator is not None else None
        self.orchestrator_id = orchestrator_id

        self.drones: Dict[str, DroneAgent] = {
            d.drone_id: DroneAgent(d, rules, config.compliance, config.trust, config.sim, orchestrator_id)
            for d in sorted(scenario.drones, key=lambda d: d.drone_id)
        }
        self.drone_ids = sorted(self.drones)
        self.orchestrator: Optional[OrchestratorAgent] = None
        if orchestrator_id is not None:
            self.orchestrator = OrchestratorAgent(
                orchestrator_id, self.drone_ids, rules, config.compliance, config.trust
            )
        self.observers: List[ObserverAgent] = [self.drones[i] for i in self.drone_ids]
        if self.orchestrator is not None:
            self.observers.append(self.orchestrator)
        self.participants = [o.agent_name for o in self.observers]
        self.rng = np.random.default_rng(config.seed)
        self.state = create_initial_state(scenario.name, config.seed, self.drone_ids, orchestrator_id)

    # -- phases --------------------------------------------------------------

    def _run_phase(self, phase: str, agents: Sequence[BaseAgent]) -> None:
        self.state.phase = phase
        for agent in agents:
            agent.handle(self.state)
            if self.state.error:
                raise SimulationError(self.state.error)

    def _update_conditions(self, tick: int) -> None:
        events = self.scenario.events
        for drone_id in self.drone_ids:
            object_kind = None
            for obj in events.objects:
                if obj.drone_id != drone_id:
                    continue
                if obj.duration_ticks == 0 and obj.tick == tick:
                    object_kind = "transient"
                elif obj.duration_ticks > 0 and obj.tick <= tick < obj.tick + obj.duration_ticks:
                    object_kind = "persistent"
                    break
            self.state.conditions[drone_id] = DroneConditions(
                weather_severe=any(e.applies(drone_id, tick) for e in events.weather_severe),
                signal_interference=any(e.applies(drone_id, tick) for e in events.signal_interference),
                object_kind=object_kind,
            )

    def exchange_twins(self, tick: int) -> None:
        """Offer every twin to every other participant; later rounds only fill gaps."""
        for receiver in self.observers:
            senders = self.drone_ids if tick == 0 else receiver.missing_twins(self.drone_ids)
            for sender_id in senders:
                if sender_id == receiver.agent_name:
                    continue
                receiver.receive_twin(self.state, sender_id, self.drones[sender_id].share_twin(tick))

    def _deliver_telemetry(self, tick: int) -> None:
        drop = self.config.sim.drop_probability
        for sender_id in self.drone_ids:
            record = self.state.records.get(sender_id)
            if record is None or record.tick != tick:
                continue
            for receiver in self.observers:
                if receiver.agent_name == sender_id:
                    continue
                if drop > 0 and self.rng.random() < drop:
                    logger.debug(f"Tick {tick}: telemetry {sender_id} -> {receiver.agent_name} dropped")
                    continue
                receiver.receive_telemetry([record])

    def _run_jobs(self, jobs: Sequence[AssessmentJob]) -> List[ComplianceVerdict]:
        if not self.config.sim.parallel_assessments or len(jobs) < 2:
            return [job.run(self.rules, self.compliance) for job in jobs]

        async def run_all() -> List[ComplianceVerdict]:
            tasks = [asyncio.to_thread(job.run, self.rules, self.compliance) for job in jobs]
            return list(await asyncio.gather(*tasks))

        return asyncio.run(run_all())

    def evaluate_window(self, tick: int) -> None:
        """Every observer assesses every peer over the window ending at ``tick``."""
        start, end = tick + 1 - self.window, tick
        self.state.phase = "evaluate"
        batches: List[Tuple[ObserverAgent, List[AssessmentJob]]] = [
            (observer, observer.assessment_jobs(self.drone_ids, start, end)) for observer in self.observers
        ]
        flat = [job for _, jobs in batches for job in jobs]
        verdicts = iter(self._run_jobs(flat))
        for observer, jobs in batches:
            observer.record_assessments(self.state, [(job, next(verdicts)) for job in jobs])
        for observer in self.observers:
            observer.publish_reports(self.state, self.participants)
        for observer in self.observers:
            observer.refresh_trust(self.state, self.drone_ids)
        logger.info(f"Tick {tick}: window [{start}, {end}] evaluated by {len(self.observers)} observers")

    # -- run -----------------------------------------------------------------

    def run(self) -> SimulationResult:
        drones = [self.drones[i] for i in self.drone_ids]
        for drone in drones:
            drone.initialize(self.state)
        for observer in self.observers:
            observer.ensure_subjects(self.drone_ids)

        for tick in range(self.scenario.ticks):
            self.state.tick = tick
            self._update_conditions(tick)
            if tick % self.window == 0:
                self.exchange_twins(tick)
            if tick >= 1:
                self._run_phase("kinematics", drones)
            self._run_phase("declare", drones)
            self._deliver_telemetry(tick)
            if (tick + 1) % self.window == 0:
                self.evaluate_window(tick)
            if self.orchestrator is not None:
                self._run_phase("orchestrate", [self.orchestrator])
            self._run_phase("react", drones)
            clear_tick_inboxes(self.state)

        return self._result()

    def _result(self) -> SimulationResult:
        traces = {
            drone_id: Trace(drone_id=drone_id, records=tuple(self.drones[drone_id].records))
            for drone_id in self.drone_ids
        }
        final: Dict[str, ComplianceVerdict] = {}
        for drone_id in self.drone_ids:
            peers = peer_positions_from_traces(traces.values(), exclude=drone_id)
            final[drone_id] = assess(self.drones[drone_id].twin, traces[drone_id], self.rules, peers, self.compliance)
        state = self.state
        return SimulationResult(
            scenario_name=self.scenario.name,
            seed=self.config.seed,
            config=self.config,
            rules=self.rules,
            twins={drone_id: self.drones[drone_id].twin for drone_id in self.drone_ids},
            traces=traces,
            final_verdicts=final,
            window_verdicts=list(state.window_verdicts),
            ledgers={o.agent_name: export_ledger(o.ledger) for o in self.observers},
            ledger_rows=list(state.ledger_rows),
            plan_log=list(state.plan_log),
            exchange_log=list(state.exchange_log),
            agent_trace=list(state.agent_trace),
            meeting_log=list(state.meeting_log),
        )


def run_scenario(
    scenario: Scenario,
    rules: Optional[SafetyRuleSet] = None,
    config: Optional[ResolvedConfig] = None,
    base_dir: Optional[Path] = None,
) -> SimulationResult:
    """
    Run ``scenario`` to completion.

    Args:
        scenario: The scenario to run.
        rules: Compiled catalog; loaded from the scenario's ``rules_catalog`` when omitted.
        config: Resolved configuration; derived from the scenario when omitted.
        base_dir: Directory relative catalog paths are resolved against.

    Raises:
        InvalidScenarioError: the scenario, its catalog or a twin fails validation.
        SimulationError: an agent failed during the run.
    """
    problems = validate_scenario(scenario)
    report = validate_fsm(canonical_fsm())
    problems.extend(f"twin FSM: {v.message}" for v in report.violations)
    if problems:
        raise InvalidScenarioError(problems)
    config = config or resolve_config(scenario)
    if rules is None:
        rules = load_scenario_rules(config, base_dir)

    logger.info(
        f"Running '{scenario.name}': {len(scenario.drones)} drones, {scenario.ticks} ticks, seed {config.seed}"
    )
    result = SwarmSimulator(scenario, rules, config).run()
    logger.info(f"Finished '{scenario.name}': {len(result.plan_log)} plan log entries")
    return result


def run_scenario_file(path: PathLike, **overrides) -> SimulationResult:
    """Load, resolve and run a scenario file; ``overrides`` go to ``resolve_config``."""
    path = Path(path)
    try:
        scenario = load_scenario(path)
    except ParseError as e:
        raise InvalidScenarioError([str(e)], str(path)) from e
    config = resolve_config(scenario, **overrides)
    return run_scenario(scenario, config=config, base_dir=path.parent)
