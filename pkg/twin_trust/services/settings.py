import hashlib
import logging
import os
from typing import Dict, Optional, Sequence, Tuple

from twin_trust import __version__
from twin_trust.app.errors import InvalidInputError
from twin_trust.app.schemas import ResolvedConfig, Scenario
from twin_trust.services.utils.file_parser import canonical_json

logger = logging.getLogger(__name__)

# Environment overrides, applied after the scenario file and before CLI flags.
ENV_WINDOW = "TWIN_TRUST_WINDOW"
ENV_THRESHOLD = "TWIN_TRUST_THRESHOLD"
ENV_WEIGHTS = "TWIN_TRUST_WEIGHTS"


def parse_weights(text: str) -> Tuple[float, float]:
    """Parse ``"0.7,0.3"`` into a weight pair."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise InvalidInputError(f"weights must be two comma-separated numbers, got '{text}'")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as e:
        raise InvalidInputError(f"weights must be numeric, got '{text}'") from e


def _env_overrides() -> Dict[str, object]:
    overrides: Dict[str, object] = {}
    window = os.getenv(ENV_WINDOW)
    if window and window.strip():
        try:
            overrides["window"] = int(window)
        except ValueError:
            logger.warning(f"Ignoring {ENV_WINDOW}={window!r}: not an integer")
    threshold = os.getenv(ENV_THRESHOLD)
    if threshold and threshold.strip():
        try:
            overrides["threshold"] = float(threshold)
        except ValueError:
            logger.warning(f"Ignoring {ENV_THRESHOLD}={threshold!r}: not a number")
    weights = os.getenv(ENV_WEIGHTS)
    if weights and weights.strip():
        try:
            overrides["weights"] = parse_weights(weights)
        except InvalidInputError as e:
            logger.warning(f"Ignoring {ENV_WEIGHTS}: {e}")
    return overrides


def resolve_config(
    scenario: Scenario,
    seed: Optional[int] = None,
    window: Optional[int] = None,
    threshold: Optional[float] = None,
    weights: Optional[Sequence[float]] = None,
    rules: Optional[str] = None,
) -> ResolvedConfig:
    """
    Effective configuration of a run.

    Layers, later ones winning: model defaults, the scenario file,
    ``TWIN_TRUST_*`` environment variables, then explicit arguments (CLI flags).

    Raises:
        InvalidInputError: a resolved value is out of range.
    """
    env = _env_overrides()
    window = window if window is not None else env.get("window", scenario.eval_window_ticks)
    threshold = threshold if threshold is not None else env.get("threshold", scenario.trust.threshold)
    weights = tuple(weights) if weights is not None else env.get("weights", scenario.trust.weights)

    if int(window) < 1:
        raise InvalidInputError(f"evaluation window must be at least 1 tick, got {window}")
    if not 0.0 < float(threshold) < 1.0:
        raise InvalidInputError(f"threshold {threshold} must lie strictly between 0 and 1")
    wd, wi = weights
    if wd < 0 or wi < 0 or abs(wd + wi - 1.0) > 1e-9:
        raise InvalidInputError(f"weights {wd}, {wi} must be non-negative and sum to 1")

    trust = scenario.trust.model_copy(update={"threshold": float(threshold), "weights": (wd, wi)})
    resolved = ResolvedConfig(
        scenario_name=scenario.name,
        seed=seed if seed is not None else scenario.seed,
        ticks=scenario.ticks,
        eval_window_ticks=int(window),
        rules_catalog=rules if rules is not None else scenario.rules_catalog,
        compliance=scenario.compliance,
        trust=trust,
        sim=scenario.sim,
        version=__version__,
    )
    logger.info(
        f"Resolved config for '{scenario.name}': seed {resolved.seed}, window {resolved.eval_window_ticks}, "
        f"threshold {trust.threshold}, weights {trust.weights}"
    )
    return resolved


def config_hash(config: ResolvedConfig) -> str:
    """SHA-256 of the canonical JSON form of ``config``."""
    return hashlib.sha256(canonical_json(config, compact=True).encode("utf-8")).hexdigest()
