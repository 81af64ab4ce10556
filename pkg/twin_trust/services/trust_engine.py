"""Direct trust from compliance evidence, indirect trust from reputation reports, and decisions."""
import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from twin_trust.app.errors import InvalidInputError, NoEvidenceError, WeightSumError
from twin_trust.app.schemas import (
    STATUS_SEVERITY,
    ComplianceVerdict,
    Countermeasure,
    Decision,
    DirectEvidence,
    ReputationReport,
    SafetyRuleSet,
    SubjectTrust,
    TickStatus,
    TickVerdict,
    TrustConfig,
    TrustDecision,
    TrustLedger,
)
from twin_trust.services.compliance import dominant_violation
from twin_trust.services.safety_engine import DEFAULT_PLAN, select_recovery, severity_at_least

logger = logging.getLogger(__name__)

DEFAULT_TRUST = TrustConfig()
NEUTRAL = 0.5
WEIGHT_TOLERANCE = 1e-9
FALLBACK_COUNTERMEASURES = (
    Countermeasure.AVOID,
    Countermeasure.MINIMIZE_SPEED,
    Countermeasure.STOP,
)


def _clamp(value: float) -> float:
    return min(1.0, max(0.0, value))


def is_positive_window(verdict: ComplianceVerdict, config: TrustConfig = DEFAULT_TRUST) -> bool:
    """A window counts as positive evidence iff it is honest enough and free of safety violations."""
    if verdict.no_twin or verdict.honesty < config.honesty_threshold:
        return False
    return not any(
        STATUS_SEVERITY[v.status] >= STATUS_SEVERITY[TickStatus.PHYSICS_VIOLATION]
        for v in verdict.per_tick
    )


def direct_score(evidence: DirectEvidence, config: TrustConfig = DEFAULT_TRUST) -> float:
    """Beta-expectation of the window record, scaled by the last openness (floored)."""
    if evidence.windows == 0:
        return NEUTRAL
    expectation = (evidence.positive + 1) / (evidence.windows + 2)
    return _clamp(expectation * max(evidence.last_openness, config.openness_floor))


def update_direct(
    evidence: DirectEvidence,
    verdict: ComplianceVerdict,
    config: TrustConfig = DEFAULT_TRUST,
) -> Tuple[DirectEvidence, float]:
    """
    Fold one window verdict into the evidence counts.

    Returns:
        The new evidence and its direct score.
    """
    positive = is_positive_window(verdict, config)
    updated = DirectEvidence(
        positive=evidence.positive + (1 if positive else 0),
        negative=evidence.negative + (0 if positive else 1),
        last_honesty=verdict.honesty,
        last_openness=verdict.openness,
    )
    return updated, direct_score(updated, config)


def aggregate_indirect(
    reports: Sequence[ReputationReport],
    reporter_trust: Mapping[str, float],
    config: TrustConfig = DEFAULT_TRUST,
    now: Optional[int] = None,
) -> float:
    """
    Weighted mean of report scores, weight = reporter trust x window count.

    Reports from reporters trusted below ``report_trust_floor`` are excluded, as
    are reports older than ``max_report_age_ticks`` when ``now`` is given.
    Unknown reporters count as neutral. Returns 0.5 when nothing remains.
    """
    weights: List[float] = []
    weighted: List[float] = []
    for report in reports:
        trust = reporter_trust.get(report.reporter_id, NEUTRAL)
        if trust < config.report_trust_floor:
            continue
        if (
            now is not None
            and config.max_report_age_ticks is not None
            and now - report.tick_issued > config.max_report_age_ticks
        ):
            continue
        weight = trust * report.window_count
        weights.append(weight)
        weighted.append(weight * report.score)
    total = math.fsum(weights)
    if total <= 0:
        return NEUTRAL
    return _clamp(math.fsum(weighted) / total)


def combine(direct: float, indirect: float, weights: Sequence[float]) -> float:
    """Weighted combination of direct and indirect trust."""
    if len(weights) != 2:
        raise WeightSumError(f"expected two weights, got {len(weights)}")
    wd, wi = weights
    if wd < 0 or wi < 0 or abs(wd + wi - 1.0) > WEIGHT_TOLERANCE:
        raise WeightSumError(f"weights {wd}, {wi} must be non-negative and sum to 1")
    return _clamp(wd * direct + wi * indirect)


def decide(
    combined: float,
    threshold: float,
    violation: Optional[TickVerdict] = None,
    rules: Optional[SafetyRuleSet] = None,
) -> TrustDecision:
    """
    Threshold decision; untrusted decisions carry countermeasures.

    Countermeasures come from the recovery plan of the dominant violation when the
    catalog has one, otherwise avoid, minimize speed and stop.
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError(f"threshold {threshold} must lie strictly between 0 and 1")
    if combined >= threshold:
        return TrustDecision(decision=Decision.TRUSTED, combined=combined, threshold=threshold)
    return TrustDecision(
        decision=Decision.UNTRUSTED,
        combined=combined,
        threshold=threshold,
        countermeasures=countermeasures_for(violation, rules),
    )


def countermeasures_for(
    violation: Optional[TickVerdict], rules: Optional[SafetyRuleSet]
) -> Tuple[Countermeasure, ...]:
    if violation is None or violation.rule_id is None or rules is None:
        return FALLBACK_COUNTERMEASURES
    plan = select_recovery(violation.rule_id, violation.cause, rules)
    if plan is DEFAULT_PLAN:
        return FALLBACK_COUNTERMEASURES
    return plan.actions


def new_ledger(owner_id: str) -> TrustLedger:
    return TrustLedger(owner_id=owner_id)


def _subject(ledger: TrustLedger, subject_id: str) -> SubjectTrust:
    if subject_id not in ledger.subjects:
        ledger.subjects[subject_id] = SubjectTrust(subject_id=subject_id)
    return ledger.subjects[subject_id]


def record_window(
    ledger: TrustLedger,
    verdict: ComplianceVerdict,
    rules: SafetyRuleSet,
    config: TrustConfig = DEFAULT_TRUST,
) -> SubjectTrust:
    """Add a window verdict to the owner's evidence about ``verdict.drone_id``."""
    entry = _subject(ledger, verdict.drone_id)
    entry.evidence, entry.direct = update_direct(entry.evidence, verdict, config)
    entry.windows_seen += 1
    worst = dominant_violation(verdict)
    entry.last_violation = worst
    if (
        config.safety_veto
        and worst is not None
        and STATUS_SEVERITY[worst.status] >= STATUS_SEVERITY[TickStatus.PHYSICS_VIOLATION]
        and severity_at_least(rules, worst.rule_id, config.veto_min_severity)
    ):
        entry.veto_window = entry.windows_seen
        logger.info(
            f"{ledger.owner_id}: safety veto on {verdict.drone_id} ({worst.rule_id} at tick {worst.tick})"
        )
    return entry


def veto_active(entry: SubjectTrust, config: TrustConfig = DEFAULT_TRUST) -> bool:
    """Veto holds for the violating window, and ``veto_hold_windows`` windows in total when set."""
    if not config.safety_veto or entry.veto_window is None:
        return False
    if entry.veto_window == entry.windows_seen:
        return True
    hold = config.veto_hold_windows
    return hold is not None and entry.windows_seen - entry.veto_window < hold


def receive_report(ledger: TrustLedger, report: ReputationReport) -> bool:
    """Store ``report``; newer reports replace older ones from the same reporter.

    Reports about the ledger owner itself are ignored. Returns whether it was stored.
    """
    if report.subject_id == ledger.owner_id or report.reporter_id == ledger.owner_id:
        return False
    entry = _subject(ledger, report.subject_id)
    for i, existing in enumerate(entry.reports):
        if existing.reporter_id == report.reporter_id:
            if existing.tick_issued > report.tick_issued:
                return False
            entry.reports[i] = report
            return True
    entry.reports.append(report)
    entry.reports.sort(key=lambda r: r.reporter_id)
    return True


def reporter_trust_map(
    ledger: TrustLedger,
    config: TrustConfig = DEFAULT_TRUST,
    orchestrator_id: Optional[str] = None,
) -> Dict[str, float]:
    """Owner's trust in each reporter: its direct score, or the configured orchestrator trust."""
    trust = {sid: entry.direct for sid, entry in ledger.subjects.items() if entry.evidence.windows > 0}
    if orchestrator_id is not None:
        trust[orchestrator_id] = config.orchestrator_trust
    return trust


def refresh_subject(
    ledger: TrustLedger,
    subject_id: str,
    rules: SafetyRuleSet,
    config: TrustConfig = DEFAULT_TRUST,
    now: Optional[int] = None,
    orchestrator_id: Optional[str] = None,
) -> SubjectTrust:
    """Recompute indirect, combined and the decision for one subject."""
    entry = _subject(ledger, subject_id)
    reporters = reporter_trust_map(ledger, config, orchestrator_id)
    entry.indirect = aggregate_indirect(entry.reports, reporters, config, now)
    entry.direct = direct_score(entry.evidence, config)
    entry.combined = combine(entry.direct, entry.indirect, config.weights)

    if entry.evidence.windows == 0 and not entry.reports:
        entry.decision = Decision.UNKNOWN
        entry.countermeasures = []
        return entry

    decision = decide(entry.combined, config.threshold, entry.last_violation, rules)
    if decision.decision == Decision.TRUSTED and veto_active(entry, config):
        decision = TrustDecision(
            decision=Decision.UNTRUSTED,
            combined=entry.combined,
            threshold=config.threshold,
            countermeasures=countermeasures_for(entry.last_violation, rules),
            vetoed=True,
        )
    entry.decision = decision.decision
    entry.countermeasures = list(decision.countermeasures)
    return entry


def publish_report(ledger: TrustLedger, subject_id: str, tick: int) -> ReputationReport:
    """
    Reputation report about ``subject_id`` carrying the owner's direct score.

    Raises:
        NoEvidenceError: the owner never evaluated a window of the subject.
    """
    entry = ledger.subjects.get(subject_id)
    if entry is None or entry.evidence.windows == 0:
        raise NoEvidenceError(subject_id)
    return ReputationReport(
        reporter_id=ledger.owner_id,
        subject_id=subject_id,
        score=entry.direct,
        window_count=entry.evidence.windows,
        tick_issued=tick,
    )


def decisions(ledger: TrustLedger) -> Dict[str, Decision]:
    return {sid: entry.decision for sid, entry in sorted(ledger.subjects.items())}


def export_ledger(ledger: TrustLedger) -> TrustLedger:
    """Deep, subject-sorted copy of ``ledger`` for export."""
    copy = ledger.model_copy(deep=True)
    copy.subjects = dict(sorted(copy.subjects.items()))
    return copy
