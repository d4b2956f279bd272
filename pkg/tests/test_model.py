"""Domain model: validation rules, report arithmetic, lifecycle state machine."""
from __future__ import annotations

import random

import pytest

from labgrade import model
from labgrade.model import (
    CaptureConfig,
    Claim,
    Complete,
    CompileStatus,
    Fail,
    GradeReport,
    IllegalTransition,
    LeaseExpired,
    ModelError,
    Session,
    StaleClaim,
    StartExecution,
    Submission,
    SubmissionState,
    Visibility,
)


def _report(total: float = 100.0) -> GradeReport:
    result = model.build_result("tc-1", (total / 100.0,), "ok")
    return model.build_report(CompileStatus(ok=True), (result,), {"tc-1": 1.0})


def _sub(**kw) -> Submission:
    defaults = dict(
        id="s-1",
        assignment_id="a-1",
        student_id="u-1",
        source="HALT\n",
        submitted_at="2026-01-01T00:00:00+00:00",
    )
    defaults.update(kw)
    return Submission(**defaults)


# --- sessions and schedules ---------------------------------------------------


def test_session_validation():
    Session(0, 1000, 0.25)  # fine
    Session(0, 1000, 0.0)  # constant low is allowed
    Session(0, 1000, 1.0)  # constant high is allowed
    with pytest.raises(ModelError):
        Session(-1, 1000, 0.5)
    with pytest.raises(ModelError):
        Session(0, 1, 0.5)
    with pytest.raises(ModelError):
        Session(0, 1000, 1.5)
    with pytest.raises(ModelError):
        Session(0, 1000, 0.0001)  # high phase shorter than 1 us


def test_duty_pct_rounding():
    assert Session(0, 1000, 0.25).duty_pct == 25
    assert Session(0, 1000, 0.255).duty_pct == 26
    assert Session(0, 3, 1 / 3).duty_pct == 33


def test_schedule_rules():
    s0 = Session(0, 1000, 0.5)
    s1 = Session(4000, 500, 0.5)
    model.validate_schedule((s0, s1), 10_000)
    with pytest.raises(ModelError):
        model.validate_schedule((), 10_000)
    with pytest.raises(ModelError):
        model.validate_schedule((s1,), 10_000)  # must start at 0
    with pytest.raises(ModelError):
        model.validate_schedule((s0, s0), 10_000)  # strictly increasing
    with pytest.raises(ModelError):
        model.validate_schedule((s0, s1), 4000)  # last session beyond capture


def test_capture_config_bounds():
    CaptureConfig(rate_hz=1, duration_us=1_000_000, pin="P0")
    CaptureConfig(rate_hz=1_000_000, duration_us=1000, pin="P3")
    with pytest.raises(ModelError):
        CaptureConfig(rate_hz=0, duration_us=1000, pin="P0")
    with pytest.raises(ModelError):
        CaptureConfig(rate_hz=2_000_000, duration_us=1000, pin="P0")
    with pytest.raises(ModelError):
        CaptureConfig(rate_hz=1000, duration_us=500, pin="P0")  # < one interval
    with pytest.raises(ModelError):
        CaptureConfig(rate_hz=1000, duration_us=70_000_000, pin="P0")
    with pytest.raises(ModelError):
        CaptureConfig(rate_hz=1000, duration_us=10_000, pin="x")


def test_test_case_validation():
    cap = CaptureConfig(rate_hz=5000, duration_us=10_000, pin="P0")
    tc = model.TestCase("t", "a", Visibility.PUBLIC, 1.0, "builtin:pwm", cap, (Session(0, 1000, 0.5),))
    assert tc.weight == 1.0
    with pytest.raises(ModelError):
        model.TestCase("t", "a", Visibility.PUBLIC, 0.0, "builtin:pwm", cap, (Session(0, 1000, 0.5),))


# --- reports ------------------------------------------------------------------


def test_build_result_score_is_mean_of_sessions():
    r = model.build_result("tc", (1.0, 0.5, 0.0), "partial")
    assert r.score == pytest.approx(50.0)
    assert r.artifacts.capture == "tc/capture.rle"
    with pytest.raises(ModelError):
        model.build_result("tc", (1.2,), "bad")


def test_build_report_weighted_total():
    a = model.build_result("a", (1.0,), "ok")
    b = model.build_result("b", (0.5,), "meh")
    rep = model.build_report(CompileStatus(ok=True), (a, b), {"a": 3.0, "b": 1.0})
    assert rep.total == pytest.approx((3 * 100 + 1 * 50) / 4)


def test_compile_error_forces_zero_scores():
    zero = model.build_result("a", (0.0,), "did not assemble")
    rep = model.build_report(CompileStatus(ok=False, message="line 2"), (zero,), {"a": 1.0})
    assert rep.total == 0.0
    nonzero = model.build_result("a", (0.4,), "oops")
    with pytest.raises(ModelError):
        model.build_report(CompileStatus(ok=False, message="line 2"), (nonzero,), {"a": 1.0})


def test_report_json_round_trip_is_canonical():
    rep = _report(73.0)
    again = GradeReport.from_json(rep.to_json())
    assert again == rep
    assert again.to_json() == rep.to_json()
    assert "\n" not in rep.to_json()


def test_grader_fault_only_serialized_when_set():
    plain = model.build_result("tc", (1.0,), "ok")
    assert "grader_fault" not in plain.to_dict()
    faulty = model.build_result("tc", (0.0,), "grading error", grader_fault="trace")
    assert faulty.to_dict()["grader_fault"] == "trace"


# --- submission lifecycle -----------------------------------------------------


def test_source_size_cap():
    _sub(source="A" * model.MAX_SOURCE_BYTES)
    with pytest.raises(ModelError):
        _sub(source="A" * (model.MAX_SOURCE_BYTES + 1))


def test_report_presence_tied_to_graded():
    with pytest.raises(ModelError):
        _sub(report=_report())
    with pytest.raises(ModelError):
        _sub(state=SubmissionState.GRADED)


def test_happy_path_transitions():
    sub = _sub()
    sub = model.transition(sub, Claim("tb-1", lease_expires_at=10.0))
    assert sub.state is SubmissionState.CLAIMED
    assert sub.attempts == 1
    sub = model.transition(sub, StartExecution("tb-1"))
    assert sub.state is SubmissionState.EXECUTING
    sub = model.transition(sub, Complete("tb-1", _report()))
    assert sub.state is SubmissionState.GRADED
    assert sub.claim_testbed is None
    assert sub.report is not None


def test_fail_path_and_lease_expiry():
    sub = model.transition(_sub(), Claim("tb-1", 10.0))
    sub = model.transition(sub, StartExecution("tb-1"))
    failed = model.transition(sub, Fail("tb-1", "coordinator died"))
    assert failed.state is SubmissionState.FAILED
    assert failed.failure_reason == "coordinator died"

    requeued = model.transition(sub, LeaseExpired())
    assert requeued.state is SubmissionState.PENDING
    assert requeued.claim_testbed is None
    assert requeued.attempts == 1  # attempts survive the requeue


def test_stale_claim_rejected():
    sub = model.transition(_sub(), Claim("tb-1", 10.0))
    with pytest.raises(StaleClaim):
        model.transition(sub, StartExecution("tb-2"))
    sub = model.transition(sub, StartExecution("tb-1"))
    with pytest.raises(StaleClaim):
        model.transition(sub, Complete("tb-2", _report()))
    with pytest.raises(StaleClaim):
        model.transition(sub, Fail("tb-2", "nope"))


def test_illegal_transitions_rejected():
    sub = _sub()
    with pytest.raises(IllegalTransition):
        model.transition(sub, StartExecution("tb-1"))
    with pytest.raises(IllegalTransition):
        model.transition(sub, Complete("tb-1", _report()))
    with pytest.raises(IllegalTransition):
        model.transition(sub, LeaseExpired())
    graded = model.transition(
        model.transition(
            model.transition(sub, Claim("tb-1", 10.0)), StartExecution("tb-1")
        ),
        Complete("tb-1", _report()),
    )
    for event in (Claim("tb-2", 20.0), StartExecution("tb-1"), LeaseExpired()):
        with pytest.raises(IllegalTransition):
            model.transition(graded, event)


def test_lifecycle_fuzz_keeps_invariants():
    """Random event storms: state stays consistent, terminal states are sticky."""
    rng = random.Random(20260826)
    events = [
        Claim("tb-1", 10.0),
        Claim("tb-2", 10.0),
        StartExecution("tb-1"),
        StartExecution("tb-2"),
        Complete("tb-1", _report()),
        Complete("tb-2", _report()),
        Fail("tb-1", "x"),
        Fail("tb-2", "x"),
        LeaseExpired(),
    ]
    for _ in range(25):
        sub = _sub()
        graded_writes = 0
        for _ in range(60):
            ev = rng.choice(events)
            try:
                sub = model.transition(sub, ev)
            except (IllegalTransition, StaleClaim):
                continue
            if sub.state is SubmissionState.GRADED:
                graded_writes += 1
            # structural invariants after every accepted event
            assert (sub.report is not None) == (sub.state is SubmissionState.GRADED)
            if sub.state in (SubmissionState.CLAIMED, SubmissionState.EXECUTING):
                assert sub.claim_testbed in ("tb-1", "tb-2")
            else:
                assert sub.claim_testbed is None
        assert graded_writes <= 1  # graded is terminal: at most one Complete ever lands
        if sub.state is SubmissionState.GRADED:
            assert sub.attempts >= 1
