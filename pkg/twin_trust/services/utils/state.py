import logging
from typing import Iterable, Optional

from twin_trust.app.schemas import DroneConditions, SimState

logger = logging.getLogger(__name__)


def create_initial_state(
    scenario_name: str,
    seed: int = 0,
    drone_ids: Iterable[str] = (),
    orchestrator_id: Optional[str] = None,
) -> SimState:
    """
    Create the shared blackboard for a run, with one empty inbox per participant.
    """
    ids = sorted(drone_ids)
    participants = ids + ([orchestrator_id] if orchestrator_id else [])
    state = SimState(
        scenario_name=scenario_name,
        seed=seed,
        conditions={drone_id: DroneConditions() for drone_id in ids},
        report_inbox={pid: [] for pid in participants},
        plan_inbox={drone_id: [] for drone_id in ids},
    )
    logger.debug(f"Initial state for '{scenario_name}' with {len(participants)} participants")
    return state


def clear_tick_inboxes(state: SimState) -> None:
    """Drop per-tick messages that every recipient has consumed."""
    for plans in state.plan_inbox.values():
        plans.clear()
