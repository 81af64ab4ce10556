import os
import sys
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import pytest
from dotenv import load_dotenv

load_dotenv()  # Load .env file from the root directory

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..")))

from twin_trust.app.schemas import (  # noqa: E402
    DigitalTwin,
    PredictionParams,
    SafetyRuleSet,
    StaticAttributes,
    TelemetryRecord,
    Trace,
    Vec3,
)
from twin_trust.services.dt_model import canonical_twin  # noqa: E402
from twin_trust.services.safety_engine import default_ruleset  # noqa: E402
from twin_trust.services.swarm_sim import load_scenario, run_scenario  # noqa: E402

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
SCENARIO_DIR = DATA_DIR / "scenarios"
CANONICAL_TWIN_PATH = DATA_DIR / "twins" / "canonical_drone.json"
BUNDLED_SCENARIOS = ("honest_pair", "separation_violator", "weather_trio", "fault_mix")

_RESULTS: Dict[str, object] = {}


def make_twin(
    drone_id: str = "D1",
    max_speed: float = 10.0,
    weight: float = 12.0,
    horizon: int = 10,
    period: int = 5,
) -> DigitalTwin:
    return canonical_twin(
        drone_id,
        StaticAttributes(weight_kg=weight, max_speed_mps=max_speed, comm_ratio=0.9),
        [(400.0, 0.0, 50.0)],
        PredictionParams(horizon_ticks=horizon, broadcast_period_ticks=period),
    )


def rec(
    tick: int,
    pos: Vec3 = (0.0, 0.0, 50.0),
    vel: Vec3 = (0.0, 0.0, 0.0),
    state: Optional[str] = None,
    events: Iterable[str] = (),
    futures: Sequence[Tuple[int, Vec3]] = (),
    drone_id: str = "D1",
) -> TelemetryRecord:
    return TelemetryRecord(
        tick=tick,
        drone_id=drone_id,
        pos=pos,
        vel=vel,
        declared_state=state,
        events=tuple(events),
        broadcast_futures=tuple(futures),
    )


def make_trace(records: Sequence[TelemetryRecord], drone_id: str = "D1") -> Trace:
    return Trace(drone_id=drone_id, records=tuple(records))


def bundled_result(name: str):
    """Run a bundled scenario once per test session."""
    if name not in _RESULTS:
        _RESULTS[name] = run_scenario(load_scenario(SCENARIO_DIR / f"{name}.json"))
    return _RESULTS[name]


@pytest.fixture
def rules() -> SafetyRuleSet:
    return default_ruleset()


@pytest.fixture
def twin() -> DigitalTwin:
    return make_twin()


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep TWIN_TRUST_* variables from a local .env out of the tests."""
    for name in ("TWIN_TRUST_WINDOW", "TWIN_TRUST_THRESHOLD", "TWIN_TRUST_WEIGHTS"):
        monkeypatch.delenv(name, raising=False)
