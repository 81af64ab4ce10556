import numpy as np
import pytest

from twin_trust.app.errors import InvalidInputError, NoEvidenceError, WeightSumError
from twin_trust.app.schemas import (
    Cause,
    ComplianceVerdict,
    Countermeasure,
    Decision,
    DirectEvidence,
    ReputationReport,
    TickStatus,
    TickVerdict,
    TrustConfig,
)
from twin_trust.services.compliance import no_twin_verdict
from twin_trust.services.trust_engine import (
    FALLBACK_COUNTERMEASURES,
    aggregate_indirect,
    combine,
    decide,
    decisions,
    direct_score,
    export_ledger,
    is_positive_window,
    new_ledger,
    publish_report,
    receive_report,
    record_window,
    refresh_subject,
    update_direct,
)

SEPARATION_LOSS = TickVerdict(
    tick=4,
    status=TickStatus.PHYSICS_VIOLATION,
    uca_type="omission",
    rule_id="R-SEP",
    cause=Cause.COORDINATION_FAILURE,
    peer_id="A",
)


def _verdict(honesty: float = 1.0, openness: float = 1.0, violation: TickVerdict = None,
             subject: str = "B") -> ComplianceVerdict:
    per_tick = [TickVerdict(tick=t, status=TickStatus.CONFORMING) for t in range(10)]
    if violation is not None:
        per_tick[violation.tick] = violation
    return ComplianceVerdict(drone_id=subject, per_tick=tuple(per_tick), honesty=honesty, openness=openness)


def _report(reporter: str, score: float, windows: int = 1, tick: int = 9, subject: str = "B") -> ReputationReport:
    return ReputationReport(
        reporter_id=reporter, subject_id=subject, score=score, window_count=windows, tick_issued=tick
    )


class TestDirectTrust:

    def test_prior(self) -> None:
        assert direct_score(DirectEvidence()) == 0.5

    def test_first_conforming_window(self) -> None:
        evidence, score = update_direct(DirectEvidence(), _verdict())
        assert evidence.positive == 1 and evidence.negative == 0
        assert score == pytest.approx(2 / 3)

    def test_first_violating_window(self) -> None:
        evidence, score = update_direct(DirectEvidence(), _verdict(honesty=0.8))
        assert evidence.negative == 1
        assert score == pytest.approx(1 / 3)

    def test_safety_violation_is_negative_even_when_honest(self) -> None:
        """One physics violation in an otherwise honest window makes it negative."""
        assert not is_positive_window(_verdict(honesty=0.96, violation=SEPARATION_LOSS))
        assert is_positive_window(_verdict(honesty=0.96))

    def test_missing_twin_is_negative(self) -> None:
        assert not is_positive_window(no_twin_verdict("B", range(10)))

    def test_openness_discount_is_floored(self) -> None:
        evidence = DirectEvidence(positive=8, negative=2, last_openness=0.1)
        assert direct_score(evidence) == pytest.approx(0.75 * 0.5)
        assert direct_score(evidence.model_copy(update={"last_openness": 0.8})) == pytest.approx(0.6)

    def test_bounded_over_random_sequences(self) -> None:
        """10000 random windows keep the direct score inside [0, 1]."""
        rng = np.random.default_rng(42)
        evidence = DirectEvidence()
        for _ in range(10000):
            verdict = _verdict(honesty=float(rng.uniform()), openness=float(rng.uniform()))
            evidence, score = update_direct(evidence, verdict)
            assert 0.0 <= score <= 1.0
        assert evidence.windows == 10000


def _indirect_oracle(reports, trust, floor):
    num = den = 0.0
    for r in reports:
        t = trust.get(r.reporter_id, 0.5)
        if t < floor:
            continue
        num += t * r.window_count * r.score
        den += t * r.window_count
    return 0.5 if den == 0 else num / den


class TestIndirectTrust:

    def test_no_reports(self) -> None:
        assert aggregate_indirect([], {}) == 0.5

    def test_symmetric_reports(self) -> None:
        reports = [_report("A", 0.9), _report("C", 0.1)]
        assert aggregate_indirect(reports, {"A": 1.0, "C": 1.0}) == pytest.approx(0.5)

    def test_weighted_mean(self) -> None:
        """0.8 weighted 3 against 0.2 weighted 2 from a half-trusted reporter gives 0.65."""
        reports = [_report("A", 0.8, windows=3), _report("C", 0.2, windows=2)]
        assert aggregate_indirect(reports, {"A": 1.0, "C": 0.5}) == pytest.approx(0.65)

    def test_distrusted_reporter_is_ignored(self) -> None:
        reports = [_report("A", 0.8), _report("C", 0.0)]
        assert aggregate_indirect(reports, {"A": 1.0, "C": 0.2}) == pytest.approx(0.8)

    def test_stale_reports_are_dropped(self) -> None:
        config = TrustConfig(max_report_age_ticks=10)
        reports = [_report("A", 0.9, tick=5), _report("C", 0.1, tick=50)]
        assert aggregate_indirect(reports, {"A": 1.0, "C": 1.0}, config, now=55) == pytest.approx(0.1)

    def test_brute_force(self) -> None:
        """1000 random report sets agree with a direct weighted-mean computation."""
        rng = np.random.default_rng(3)
        for _ in range(1000):
            n = int(rng.integers(0, 6))
            reports = [
                _report(f"R{i}", float(rng.uniform()), windows=int(rng.integers(1, 20)))
                for i in range(n)
            ]
            trust = {f"R{i}": float(rng.uniform()) for i in range(n) if rng.uniform() < 0.8}
            got = aggregate_indirect(reports, trust)
            assert got == pytest.approx(_indirect_oracle(reports, trust, 0.3), abs=1e-12)
            assert 0.0 <= got <= 1.0


class TestCombineAndDecide:

    def test_combine(self) -> None:
        assert combine(0.8, 0.4, (0.7, 0.3)) == pytest.approx(0.68)
        assert combine(0.37, 0.37, (0.2, 0.8)) == pytest.approx(0.37)
        assert combine(1.0, 0.0, (1.0, 0.0)) == 1.0

    @pytest.mark.parametrize("weights", [(0.6, 0.6), (-0.1, 1.1), (1.0,)])
    def test_bad_weights(self, weights) -> None:
        with pytest.raises(WeightSumError):
            combine(0.5, 0.5, weights)

    def test_decide(self) -> None:
        assert decide(0.68, 0.5).decision == Decision.TRUSTED
        assert decide(0.5, 0.5).decision == Decision.TRUSTED
        untrusted = decide(0.33, 0.5)
        assert untrusted.decision == Decision.UNTRUSTED
        assert untrusted.countermeasures == FALLBACK_COUNTERMEASURES
        assert untrusted.countermeasures == (
            Countermeasure.AVOID, Countermeasure.MINIMIZE_SPEED, Countermeasure.STOP,
        )

    def test_countermeasures_follow_the_violation(self, rules) -> None:
        decision = decide(0.2, 0.5, SEPARATION_LOSS, rules)
        assert decision.countermeasures == (Countermeasure.AVOID, Countermeasure.MINIMIZE_SPEED)

    @pytest.mark.parametrize("threshold", [0.0, 1.0, 1.5])
    def test_threshold_range(self, threshold) -> None:
        with pytest.raises(InvalidInputError):
            decide(0.5, threshold)


class TestLedger:

    def test_publish_after_one_window(self, rules) -> None:
        ledger = new_ledger("A")
        record_window(ledger, _verdict(), rules)
        report = publish_report(ledger, "B", 9)
        assert report.score == pytest.approx(2 / 3)
        assert report.window_count == 1
        assert report.reporter_id == "A"

    def test_publish_without_evidence(self) -> None:
        with pytest.raises(NoEvidenceError):
            publish_report(new_ledger("A"), "B", 9)

    def test_publish_ten_windows(self, rules) -> None:
        """8 positive and 2 negative windows report 9/12 = 0.75 with weight 10."""
        ledger = new_ledger("A")
        for honest in [True] * 8 + [False] * 2:
            record_window(ledger, _verdict(honesty=1.0 if honest else 0.5), rules)
        report = publish_report(ledger, "B", 99)
        assert report.window_count == 10
        assert report.score == pytest.approx(0.75)

    def test_receive_report_keeps_newest(self) -> None:
        ledger = new_ledger("A")
        assert receive_report(ledger, _report("C", 0.4, tick=9))
        assert receive_report(ledger, _report("C", 0.6, tick=19))
        assert not receive_report(ledger, _report("C", 0.1, tick=4))
        assert not receive_report(ledger, _report("C", 0.9, subject="A"))
        assert [r.score for r in ledger.subjects["B"].reports] == [0.6]

    def test_refresh_combines_direct_and_indirect(self, rules) -> None:
        ledger = new_ledger("A")
        record_window(ledger, _verdict(), rules)
        receive_report(ledger, _report("C", 0.2))
        entry = refresh_subject(ledger, "B", rules, now=9)
        # C is unknown to A and counts as neutral.
        assert entry.indirect == pytest.approx(0.2)
        assert entry.combined == pytest.approx(0.7 * (2 / 3) + 0.3 * 0.2)
        assert entry.decision == Decision.TRUSTED

    def test_unevaluated_subject_stays_unknown(self, rules) -> None:
        ledger = new_ledger("A")
        entry = refresh_subject(ledger, "B", rules)
        assert entry.decision == Decision.UNKNOWN
        assert entry.combined == 0.5
        assert decisions(ledger) == {"B": Decision.UNKNOWN}

    def test_safety_veto(self, rules) -> None:
        """A catastrophic-hazard violation overrides a high score for its window."""
        ledger = new_ledger("A")
        for _ in range(20):
            record_window(ledger, _verdict(), rules)
        record_window(ledger, _verdict(honesty=0.9, violation=SEPARATION_LOSS), rules)
        entry = refresh_subject(ledger, "B", rules)
        assert entry.combined >= 0.5
        assert entry.decision == Decision.UNTRUSTED
        assert entry.countermeasures == [Countermeasure.AVOID, Countermeasure.MINIMIZE_SPEED]

        record_window(ledger, _verdict(), rules)
        assert refresh_subject(ledger, "B", rules).decision == Decision.TRUSTED

    def test_veto_hold(self, rules) -> None:
        config = TrustConfig(veto_hold_windows=2)
        ledger = new_ledger("A")
        for _ in range(20):
            record_window(ledger, _verdict(), rules, config)
        record_window(ledger, _verdict(honesty=0.9, violation=SEPARATION_LOSS), rules, config)
        record_window(ledger, _verdict(), rules, config)
        assert refresh_subject(ledger, "B", rules, config).decision == Decision.UNTRUSTED
        record_window(ledger, _verdict(), rules, config)
        assert refresh_subject(ledger, "B", rules, config).decision == Decision.TRUSTED

    def test_veto_can_be_disabled(self, rules) -> None:
        config = TrustConfig(safety_veto=False)
        ledger = new_ledger("A")
        for _ in range(20):
            record_window(ledger, _verdict(), rules, config)
        record_window(ledger, _verdict(honesty=0.9, violation=SEPARATION_LOSS), rules, config)
        assert refresh_subject(ledger, "B", rules, config).decision == Decision.TRUSTED

    def test_export_is_sorted_copy(self, rules) -> None:
        ledger = new_ledger("A")
        record_window(ledger, _verdict(subject="Z"), rules)
        record_window(ledger, _verdict(subject="B"), rules)
        exported = export_ledger(ledger)
        assert list(exported.subjects) == ["B", "Z"]
        exported.subjects["B"].direct = 0.0
        assert ledger.subjects["B"].direct != 0.0
