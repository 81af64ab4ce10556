import json

import pytest

from twin_trust.app.errors import IdMismatchError
from twin_trust.app.schemas import Cause, TickStatus
from twin_trust.services.compliance import (
    AssessmentJob,
    assess,
    assess_window,
    check_physics_conformance,
    check_prediction_conformance,
    check_state_conformance,
    has_safety_violation,
    has_violations,
    intent_due,
    no_twin_verdict,
    peer_positions_from_traces,
    verdict_document,
    verdict_table,
)
from twin_trust.tests.conftest import make_trace, make_twin, rec

HOVER = (0.0, 0.0, 50.0)


def _hover_trace(states):
    """Stationary drone declaring ``states`` on consecutive ticks, predicting it stays put."""
    return make_trace(
        [rec(t, HOVER, state=s, futures=[(t + 1, HOVER)]) for t, s in enumerate(states)]
    )


class TestStateConformance:

    def test_power_on_sequence(self, twin, rules) -> None:
        """S1, S2, S3 driven by power_on and moving_forward all conform."""
        trace = make_trace([
            rec(0, state="S1"),
            rec(1, state="S2", events=["power_on"]),
            rec(2, state="S3", events=["moving_forward"]),
        ])
        verdicts = check_state_conformance(twin, trace, rules)
        assert [v.status for v in verdicts] == [TickStatus.CONFORMING] * 3

    def test_missing_edge_is_state_violation(self, twin, rules) -> None:
        """S1 then S7 has no edge; the second tick is a state violation."""
        trace = make_trace([rec(1, state="S1"), rec(2, state="S7")])
        verdicts = check_state_conformance(twin, trace, rules)
        assert verdicts[0].status == TickStatus.CONFORMING
        assert verdicts[1].status == TickStatus.STATE_VIOLATION
        assert verdicts[1].tick == 2
        assert verdicts[1].rule_id == "R-FSM"
        assert verdicts[1].cause == Cause.INTERNAL_FAULT

    def test_empty_trace(self, twin, rules) -> None:
        assert check_state_conformance(twin, make_trace([]), rules) == []

    def test_first_record_may_be_powered_on(self, twin, rules) -> None:
        """A trace starting after power-on may open in S2."""
        verdicts = check_state_conformance(twin, make_trace([rec(0, state="S2")]), rules)
        assert verdicts[0].status == TickStatus.CONFORMING

    def test_first_record_declares_initial_with_power_on(self, twin, rules) -> None:
        """Opening in S1 while power_on fires conforms, and S2 may follow."""
        trace = make_trace([rec(0, state="S1", events=["power_on"]), rec(1, state="S2")])
        verdicts = check_state_conformance(twin, trace, rules)
        assert [v.status for v in verdicts] == [TickStatus.CONFORMING] * 2

    def test_first_record_initial_then_stays(self, twin, rules) -> None:
        trace = make_trace([rec(0, state="S1", events=["power_on"]), rec(1, state="S1")])
        verdicts = check_state_conformance(twin, trace, rules)
        assert [v.status for v in verdicts] == [TickStatus.CONFORMING] * 2

    def test_either_continuation_only_for_one_tick(self, twin, rules) -> None:
        trace = make_trace([
            rec(0, state="S1", events=["power_on"]),
            rec(1, state="S1"),
            rec(2, state="S3"),
        ])
        verdicts = check_state_conformance(twin, trace, rules)
        assert verdicts[2].status == TickStatus.STATE_VIOLATION

    def test_undeclared_then_resync(self, twin, rules) -> None:
        """After an undeclared tick, any reachable state is accepted again."""
        trace = make_trace([rec(0, state="S1"), rec(1), rec(2, state="S9")])
        verdicts = check_state_conformance(twin, trace, rules)
        assert [v.status for v in verdicts] == [
            TickStatus.CONFORMING,
            TickStatus.UNDECLARED,
            TickStatus.CONFORMING,
        ]
        assert verdicts[1].rule_id == "R-DECLARE"

    def test_unknown_declared_state(self, twin, rules) -> None:
        verdicts = check_state_conformance(twin, make_trace([rec(0, state="S1"), rec(1, state="S42")]), rules)
        assert verdicts[1].status == TickStatus.STATE_VIOLATION
        assert "unknown state" in verdicts[1].detail

    def test_id_mismatch(self, twin, rules) -> None:
        with pytest.raises(IdMismatchError):
            check_state_conformance(twin, make_trace([rec(0, drone_id="D2")], drone_id="D2"), rules)


class TestPhysicsConformance:

    def test_stop_state_at_rest(self, twin, rules) -> None:
        verdicts = check_physics_conformance(twin, make_trace([rec(0, state="S4")]), rules)
        assert verdicts[0].status == TickStatus.CONFORMING

    def test_stop_state_moving(self, twin, rules) -> None:
        verdicts = check_physics_conformance(twin, make_trace([rec(0, vel=(3.0, 0, 0), state="S4")]), rules)
        assert verdicts[0].rule_id == "R-STOP"

    def test_accelerate_state_slowing_down(self, twin, rules) -> None:
        """Declaring S22 while the speed drops from 5 to 4 violates the acceleration rule."""
        trace = make_trace([rec(0, vel=(5.0, 0, 0), state="S22"), rec(1, (5.0, 0, 50), (4.0, 0, 0), state="S22")])
        verdicts = check_physics_conformance(twin, trace, rules)
        assert verdicts[0].status == TickStatus.CONFORMING
        assert verdicts[1].status == TickStatus.PHYSICS_VIOLATION
        assert verdicts[1].rule_id == "R-ACCEL"
        assert verdicts[1].uca_type == "wrong_value"

    def test_separation_state_with_close_peer(self, twin, rules) -> None:
        """S20 with a peer 35 m away cites the separation rule and the peer."""
        peers = {0: {"D2": (35.0, 0.0, 50.0)}}
        verdicts = check_physics_conformance(twin, make_trace([rec(0, state="S20")]), rules, peers)
        assert verdicts[0].status == TickStatus.PHYSICS_VIOLATION
        assert verdicts[0].rule_id == "R-SEP"
        assert verdicts[0].peer_id == "D2"
        assert verdicts[0].uca_type == "omission"
        assert verdicts[0].cause == Cause.COORDINATION_FAILURE

    def test_weather_separation(self, twin, rules) -> None:
        """50 m is enough in clear weather but not in severe weather."""
        peers = {0: {"D2": (50.0, 0.0, 50.0)}}
        clear = check_physics_conformance(twin, make_trace([rec(0, state="S20")]), rules, peers)
        stormy = check_physics_conformance(
            twin, make_trace([rec(0, state="S20", events=["weather_severe"])]), rules, peers
        )
        assert clear[0].status == TickStatus.CONFORMING
        assert stormy[0].rule_id == "R-WEATHER-SEP"
        assert stormy[0].cause == Cause.ENVIRONMENT_INFLUENCE

    def test_speed_above_declared_max(self, twin, rules) -> None:
        verdicts = check_physics_conformance(twin, make_trace([rec(0, vel=(12.0, 0, 0), state="S3")]), rules)
        assert verdicts[0].rule_id == "R-SPEED"
        assert verdicts[0].uca_type == "commission"

    def test_separation_outranks_speed(self, twin, rules) -> None:
        peers = {0: {"D2": (35.0, 0.0, 50.0)}}
        trace = make_trace([rec(0, vel=(12.0, 0, 0), state="S20")])
        assert check_physics_conformance(twin, trace, rules, peers)[0].rule_id == "R-SEP"


class TestPredictionConformance:

    def test_exact_match(self) -> None:
        trace = make_trace([rec(0, (0.0, 0, 10), futures=[(5, (5.0, 0, 10))]), rec(5, (5.0, 0, 10))])
        assert all(v.status == TickStatus.CONFORMING for v in check_prediction_conformance(trace, 2.0))

    def test_four_metre_deviation(self) -> None:
        """Actual (9,0,10) against predicted (5,0,10) with epsilon 2 is flagged."""
        trace = make_trace([rec(0, (0.0, 0, 10), futures=[(5, (5.0, 0, 10))]), rec(5, (9.0, 0, 10))])
        verdicts = check_prediction_conformance(trace, 2.0)
        assert verdicts[1].status == TickStatus.PREDICTION_VIOLATION
        assert verdicts[1].tick == 5
        assert "4.000" in verdicts[1].detail

    def test_no_broadcasts(self) -> None:
        trace = make_trace([rec(t) for t in range(5)])
        assert all(v.status == TickStatus.CONFORMING for v in check_prediction_conformance(trace, 2.0))

    def test_later_broadcast_replaces_earlier(self) -> None:
        """The most recent prediction for a tick is the one checked."""
        trace = make_trace([
            rec(0, futures=[(2, (100.0, 0, 50))]),
            rec(1, futures=[(2, HOVER)]),
            rec(2),
        ])
        assert check_prediction_conformance(trace, 2.0)[2].status == TickStatus.CONFORMING


class TestAssess:

    def test_two_state_violations_in_ten_ticks(self, twin, rules) -> None:
        """8 conforming and 2 violating declared ticks give honesty 0.8, openness 1."""
        states = ["S1"] * 10
        states[3] = states[7] = "S7"
        verdict = assess(twin, _hover_trace(states), rules)
        assert verdict.honesty == pytest.approx(0.8)
        assert verdict.openness == pytest.approx(1.0)
        assert verdict.summary["state_violation"] == 2
        assert has_violations(verdict)
        assert has_safety_violation(verdict)

    def test_honest_hover(self, twin, rules) -> None:
        verdict = assess(twin, _hover_trace(["S1"] * 6), rules)
        assert verdict.honesty == 1.0
        assert verdict.openness == 1.0
        assert not has_violations(verdict)

    def test_no_declaration(self, twin, rules) -> None:
        """Without any declared state honesty is 0 and the flag is set."""
        verdict = assess(twin, make_trace([rec(t) for t in range(4)]), rules)
        assert verdict.no_declaration
        assert verdict.honesty == 0.0
        assert verdict.openness == 0.0

    def test_empty_trace_is_vacuously_honest(self, twin, rules) -> None:
        verdict = assess(twin, make_trace([]), rules)
        assert (verdict.honesty, verdict.openness) == (1.0, 1.0)
        assert verdict.per_tick == ()

    def test_missed_broadcasts_reduce_openness(self, twin, rules) -> None:
        """Broadcasts are due every five ticks; sending only the first halves adherence."""
        trace = make_trace([rec(t, state="S1", futures=[(t + 1, HOVER)] if t == 0 else ()) for t in range(10)])
        verdict = assess(twin, trace, rules)
        assert verdict.broadcast_adherence == pytest.approx(0.5)
        assert verdict.openness == pytest.approx(0.5)
        assert verdict.honesty == 1.0

    def test_unannounced_turn(self, twin, rules) -> None:
        """A 90 degree turn without turn_announced leaves the announcement unmet."""
        silent = make_trace([
            rec(0, vel=(5.0, 0, 0), state="S1", futures=[(1, (5.0, 0, 50))]),
            rec(1, (5.0, 0, 50), (0, 5.0, 0), state="S1"),
        ])
        announced = make_trace([
            rec(0, vel=(5.0, 0, 0), state="S1", futures=[(1, (5.0, 0, 50))]),
            rec(1, (5.0, 0, 50), (0, 5.0, 0), state="S1", events=["turn_announced"]),
        ])
        assert assess(twin, silent, rules).announcement_adherence == 0.0
        assert assess(twin, announced, rules).announcement_adherence == 1.0

    def test_window_uses_prefix_context(self, twin, rules) -> None:
        """Window 5..9 counts only its own ticks."""
        states = ["S1"] * 10
        states[3] = states[7] = "S7"
        verdict = assess_window(twin, _hover_trace(states), rules, None, 5, 9)
        assert [v.tick for v in verdict.per_tick] == [5, 6, 7, 8, 9]
        assert verdict.honesty == pytest.approx(0.8)

    def test_assess_is_deterministic(self, twin, rules) -> None:
        trace = _hover_trace(["S1", "S7", "S1"])
        first = verdict_document(assess(twin, trace, rules))
        assert first == verdict_document(assess(twin, trace, rules))
        assert json.loads(first)["drone_id"] == "D1"

    def test_verdict_table_lists_violations(self, twin, rules) -> None:
        table = verdict_table(assess(twin, _hover_trace(["S1", "S7"]), rules))
        assert table.startswith("drone D1: honesty 0.500")
        assert "state_violation" in table


class TestHelpers:

    def test_intent_due(self) -> None:
        assert intent_due(None, (5.0, 0, 0)) == []
        assert intent_due((5.0, 0, 0), (0, 5.0, 0)) == ["turn_announced"]
        assert intent_due((5.0, 0, 0), (7.0, 0, 0)) == ["speed_change_announced"]

    def test_peer_positions_from_traces(self) -> None:
        a = make_trace([rec(0, (1.0, 0, 0), drone_id="A")], drone_id="A")
        b = make_trace([rec(0, (2.0, 0, 0), drone_id="B")], drone_id="B")
        assert peer_positions_from_traces([a, b], exclude="A") == {0: {"B": (2.0, 0, 0)}}

    def test_no_twin_verdict(self) -> None:
        verdict = no_twin_verdict("D9", [0, 1, 2])
        assert verdict.no_twin and verdict.no_declaration
        assert verdict.openness == 0.0
        assert verdict.summary["undeclared"] == 3

    def test_job_without_twin(self, rules) -> None:
        job = AssessmentJob("A", "B", 0, 1, None, make_trace([], drone_id="B"), {}, ticks=(0, 1))
        assert job.run(rules).no_twin

    def test_job_with_twin(self, rules) -> None:
        job = AssessmentJob("A", "D1", 0, 1, make_twin(), _hover_trace(["S1", "S1"]), {}, ticks=(0, 1))
        assert job.run(rules).honesty == 1.0
