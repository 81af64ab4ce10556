"""Hazard-analysis catalog compiler and the numeric safety checks built on it."""
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

from pydantic import ValidationError

from twin_trust.app.errors import CatalogSchemaError, DanglingReferenceError, InvalidInputError
from twin_trust.app.schemas import (
    CONFORMING,
    SEVERITY_RANK,
    Cause,
    Countermeasure,
    Hazard,
    HazardCatalog,
    NumericRules,
    RecoveryPlan,
    RuleViolation,
    SafetyRuleSet,
    SeparationResult,
    Severity,
    StaticAttributes,
    UcaType,
)
from twin_trust.services import kinematics
from twin_trust.services.utils.file_parser import load_json

logger = logging.getLogger(__name__)

DEFAULT_CATALOG = "default"
DEFAULT_CATALOG_PATH = Path(__file__).resolve().parent.parent / "data" / "catalogs" / "default_stpa.json"

DEFAULT_PLAN = RecoveryPlan(
    id="P-DEFAULT",
    actions=(Countermeasure.STOP, Countermeasure.NOTIFY_ORCHESTRATOR),
    deadline_ticks=10,
)

# Rule ids every compiled rule set can check, independent of the catalog tables.
CHECKABLE_RULE_IDS = (
    "R-SEP",
    "R-WEATHER-SEP",
    "R-WEIGHT",
    "R-SPEED",
    "R-LICENSE",
    "R-AIRWORTHY",
    "R-COMM",
    "R-STOP",
    "R-BRAKE",
    "R-KEEP",
    "R-ACCEL",
    "R-DECEL",
    "R-PREDICT",
    "R-FSM",
    "R-DECLARE",
    "R-SIGNAL",
)

COORDINATION_RULES = {"R-SEP", "R-PREDICT", "R-DECLARE"}


def compile_ruleset(catalog: Union[Mapping[str, Any], HazardCatalog]) -> SafetyRuleSet:
    """
    Compile a hazard-analysis document into a ``SafetyRuleSet``.

    Raises:
        CatalogSchemaError: the document does not match the catalog schema.
        DanglingReferenceError: lists every reference to a missing hazard, UCA or plan.
    """
    if isinstance(catalog, HazardCatalog):
        parsed = catalog
    else:
        try:
            parsed = HazardCatalog.model_validate(catalog)
        except ValidationError as e:
            first = e.errors()[0]
            loc = ".".join(str(p) for p in first.get("loc", ()))
            raise CatalogSchemaError(f"{loc or '<root>'}: {first.get('msg')}") from e

    problems: List[str] = []
    for kind, items in (("hazard", parsed.hazards), ("uca", parsed.ucas),
                        ("factor", parsed.factors), ("plan", parsed.plans)):
        seen: set = set()
        for item in items:
            if item.id in seen:
                problems.append(f"duplicate {kind} id {item.id}")
            seen.add(item.id)

    hazard_ids = {h.id for h in parsed.hazards}
    uca_ids = {u.id for u in parsed.ucas}
    plan_ids = {p.id for p in parsed.plans}
    for uca in parsed.ucas:
        if uca.hazard_id not in hazard_ids:
            problems.append(f"uca {uca.id} references missing hazard {uca.hazard_id}")
    for factor in parsed.factors:
        if factor.uca_id not in uca_ids:
            problems.append(f"factor {factor.id} references missing uca {factor.uca_id}")
        if factor.recovery_plan_id not in plan_ids:
            problems.append(f"factor {factor.id} references missing plan {factor.recovery_plan_id}")
    for rule_id, hazard_id in sorted(parsed.rule_hazards.items()):
        if hazard_id not in hazard_ids:
            problems.append(f"rule {rule_id} references missing hazard {hazard_id}")
    if problems:
        raise DanglingReferenceError(problems)

    rule_ids = sorted(set(CHECKABLE_RULE_IDS) | uca_ids)
    numeric = parsed.numeric
    ruleset = SafetyRuleSet(
        **numeric.model_dump(),
        hazards=parsed.hazards,
        ucas=parsed.ucas,
        factors=parsed.factors,
        plans=parsed.plans,
        rule_hazards=dict(sorted(parsed.rule_hazards.items())),
        rule_ids=tuple(rule_ids),
    )
    logger.info(
        f"Compiled rule set: {len(parsed.hazards)} hazards, {len(parsed.ucas)} UCAs, "
        f"{len(parsed.factors)} factors, {len(parsed.plans)} plans"
    )
    return ruleset


def serialize_catalog(rules: SafetyRuleSet) -> Dict[str, Any]:
    """Catalog document that compiles back to ``rules``."""
    numeric = NumericRules(**{name: getattr(rules, name) for name in NumericRules.model_fields})
    catalog = HazardCatalog(
        hazards=rules.hazards,
        ucas=rules.ucas,
        factors=rules.factors,
        plans=rules.plans,
        numeric=numeric,
        rule_hazards=dict(rules.rule_hazards),
    )
    return catalog.model_dump(mode="json")


def resolve_catalog_path(ref: str, base_dir: Optional[Path] = None) -> Path:
    if ref == DEFAULT_CATALOG:
        return DEFAULT_CATALOG_PATH
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return path


def load_ruleset(ref: str = DEFAULT_CATALOG, base_dir: Optional[Path] = None) -> SafetyRuleSet:
    """Compile the packaged catalog (``"default"``) or a catalog file."""
    path = resolve_catalog_path(ref, base_dir)
    return compile_ruleset(load_json(path))


def default_ruleset() -> SafetyRuleSet:
    return load_ruleset(DEFAULT_CATALOG)


def required_separation(rules: SafetyRuleSet, weather_severe: bool) -> float:
    factor = rules.weather_separation_factor if weather_severe else 1.0
    return rules.min_separation_m * factor


def check_separation(
    pos_a: Sequence[float],
    pos_b: Sequence[float],
    rules: SafetyRuleSet,
    weather_severe: bool = False,
) -> SeparationResult:
    """Minimum-separation check; the boundary distance itself is allowed."""
    required = required_separation(rules, weather_severe)
    dist = kinematics.distance(pos_a, pos_b)
    return SeparationResult(ok=dist >= required, distance_m=round(dist, 3), required_m=required)


def check_static(attrs: StaticAttributes, rules: SafetyRuleSet) -> List[RuleViolation]:
    """Design-time checks on a twin's static attributes."""
    found: List[RuleViolation] = []
    if attrs.weight_kg >= rules.max_weight_kg:
        found.append(_violation(rules, "R-WEIGHT",
                                f"weight {attrs.weight_kg} kg is not below {rules.max_weight_kg} kg"))
    if not attrs.license_ok:
        found.append(_violation(rules, "R-LICENSE", "operating license missing"))
    if not attrs.airworthiness_ok:
        found.append(_violation(rules, "R-AIRWORTHY", "airworthiness certificate missing"))
    if attrs.max_speed_mps > rules.max_speed_mps:
        found.append(_violation(rules, "R-SPEED",
                                f"declared max speed {attrs.max_speed_mps} exceeds {rules.max_speed_mps}"))
    if attrs.comm_ratio < rules.min_comm_ratio:
        found.append(_violation(rules, "R-COMM",
                                f"communication ratio {attrs.comm_ratio} below {rules.min_comm_ratio}"))
    return found


def _violation(rules: SafetyRuleSet, rule_id: str, message: str) -> RuleViolation:
    return RuleViolation(rule_id=rule_id, message=message, hazard_id=rules.rule_hazards.get(rule_id))


def hazard_for(rules: SafetyRuleSet, ref: Optional[str]) -> Optional[Hazard]:
    """Hazard behind a rule id, UCA id or hazard id."""
    if ref is None:
        return None
    if ref in rules.rule_hazards:
        return rules.get_hazard(rules.rule_hazards[ref])
    uca = rules.get_uca(ref)
    if uca is not None:
        return rules.get_hazard(uca.hazard_id)
    return rules.get_hazard(ref)


def severity_at_least(rules: SafetyRuleSet, ref: Optional[str], minimum: Severity) -> bool:
    hazard = hazard_for(rules, ref)
    return hazard is not None and SEVERITY_RANK[hazard.severity] >= SEVERITY_RANK[minimum]


def omission_deadline(rules: SafetyRuleSet, hazard_id: Optional[str]) -> int:
    """Deadline of the first recovery plan linked to ``hazard_id``; the default plan's otherwise."""
    if hazard_id is not None:
        for factor in rules.factors:
            uca = rules.get_uca(factor.uca_id)
            plan = rules.get_plan(factor.recovery_plan_id)
            if uca is not None and plan is not None and uca.hazard_id == hazard_id:
                return plan.deadline_ticks
    return DEFAULT_PLAN.deadline_ticks


def classify_uca(
    expected_action: Optional[str],
    observed_action: Optional[str],
    expected_tick: Optional[int] = None,
    observed_tick: Optional[int] = None,
    rules: Optional[SafetyRuleSet] = None,
    hazard_id: Optional[str] = None,
) -> str:
    """
    Classify an expected/observed control-action pair.

    Returns one of the ``UcaType`` values or ``"conforming"``. Ticks within
    ``timing_tolerance_ticks`` of each other count as the same tick, so a
    differing token there is ``wrong_value`` even when the ticks differ.

    Raises:
        InvalidInputError: neither an expected nor an observed action is given.
    """
    if expected_action is None and observed_action is None:
        raise InvalidInputError("classify_uca needs an expected or an observed action")
    if expected_action is None:
        return UcaType.COMMISSION.value
    if observed_action is None:
        return UcaType.OMISSION.value

    rules = rules or SafetyRuleSet()
    tolerance = rules.timing_tolerance_ticks
    delta = 0
    if expected_tick is not None and observed_tick is not None:
        delta = observed_tick - expected_tick
    if delta > omission_deadline(rules, hazard_id):
        return UcaType.OMISSION.value
    if delta < -tolerance:
        return UcaType.TOO_EARLY.value
    if delta > tolerance:
        return UcaType.TOO_LATE.value
    if expected_action != observed_action:
        return UcaType.WRONG_VALUE.value
    return CONFORMING


def select_recovery(violation: str, cause: Union[Cause, str, None], rules: SafetyRuleSet) -> RecoveryPlan:
    """
    Recovery plan for a violation (rule id, UCA id or hazard id) and its cause.

    Picks the first causal factor with the same cause whose UCA belongs to the
    violation's hazard; falls back to ``DEFAULT_PLAN`` when nothing matches.
    """
    hazard = hazard_for(rules, violation)
    cause_value = cause.value if isinstance(cause, Cause) else cause
    if hazard is not None and cause_value is not None:
        for factor in rules.factors:
            if factor.cause.value != cause_value:
                continue
            uca = rules.get_uca(factor.uca_id)
            if uca is None or uca.hazard_id != hazard.id:
                continue
            plan = rules.get_plan(factor.recovery_plan_id)
            if plan is not None:
                return plan
    logger.debug(f"No causal factor for {violation}/{cause_value}; using {DEFAULT_PLAN.id}")
    return DEFAULT_PLAN


def infer_cause(rule_id: Optional[str], events: Sequence[str] = ()) -> Cause:
    """Causal-factor category behind a violation observed alongside ``events``."""
    if "signal_interference" in events or rule_id == "R-SIGNAL":
        return Cause.CONNECTION_PROBLEM
    if "weather_severe" in events or rule_id == "R-WEATHER-SEP":
        return Cause.ENVIRONMENT_INFLUENCE
    if rule_id in COORDINATION_RULES:
        return Cause.COORDINATION_FAILURE
    return Cause.INTERNAL_FAULT
