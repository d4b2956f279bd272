"""Domain model: courses, assignments, test cases, submissions, grade reports.

Everything here is plain data plus the submission lifecycle state machine.
Nothing in this module talks to the network or the database; the store and
the services build on these types.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field


class Role(str, enum.Enum):
    INSTRUCTOR = "instructor"
    STUDENT = "student"


class Visibility(str, enum.Enum):
    PUBLIC = "public"
    SEMI_PUBLIC = "semi_public"
    HIDDEN = "hidden"


class SubmissionState(str, enum.Enum):
    PENDING = "pending"
    CLAIMED = "claimed"
    EXECUTING = "executing"
    GRADED = "graded"
    FAILED = "failed"


MAX_SOURCE_BYTES = 64 * 1024


class ModelError(Exception):
    """Base class for domain validation failures."""


class IllegalTransition(ModelError):
    """Raised when a lifecycle event is not legal in the current state."""


class StaleClaim(ModelError):
    """Raised when an event names a testbed that no longer holds the claim."""


@dataclass(frozen=True)
class Session:
    """One PWM target: from start_us onward the program should produce
    a square wave with the given period and duty ratio."""

    start_us: int
    period_us: int
    duty: float

    def __post_init__(self) -> None:
        if self.start_us < 0:
            raise ModelError(f"session start must be >= 0, got {self.start_us}")
        if self.period_us < 2:
            raise ModelError(f"session period must be >= 2 us, got {self.period_us}")
        if not 0.0 <= self.duty <= 1.0:
            raise ModelError(f"duty must be in [0, 1], got {self.duty}")
        # Mid-range duties must leave at least 1 us in each phase, otherwise
        # the wave is indistinguishable from a constant level.
        if 0.0 < self.duty < 1.0:
            high = self.duty * self.period_us
            if high < 1.0 or (self.period_us - high) < 1.0:
                raise ModelError(
                    f"duty {self.duty} on period {self.period_us} us leaves a "
                    "phase shorter than 1 us"
                )

    @property
    def duty_pct(self) -> int:
        return round(self.duty * 100)


def validate_schedule(sessions: tuple[Session, ...], duration_us: int) -> None:
    """A schedule must start at 0, be strictly ordered, and fit the capture."""
    if not sessions:
        raise ModelError("schedule must contain at least one session")
    if sessions[0].start_us != 0:
        raise ModelError("first session must start at 0")
    for prev, cur in zip(sessions, sessions[1:]):
        if cur.start_us <= prev.start_us:
            raise ModelError("session starts must be strictly increasing")
    if sessions[-1].start_us >= duration_us:
        raise ModelError("last session starts at or after the capture ends")


@dataclass(frozen=True)
class CaptureConfig:
    """How the engine samples the observed pin."""

    rate_hz: int
    duration_us: int
    pin: str

    MIN_RATE = 1
    MAX_RATE = 1_000_000  # one sample per tick of the 1 MHz reference DUT
    MAX_DURATION_US = 60_000_000

    def __post_init__(self) -> None:
        if not self.MIN_RATE <= self.rate_hz <= self.MAX_RATE:
            raise ModelError(f"sample rate {self.rate_hz} outside supported range")
        if not 0 < self.duration_us <= self.MAX_DURATION_US:
            raise ModelError(f"capture duration {self.duration_us} outside supported range")
        if self.duration_us * self.rate_hz < 1_000_000:
            raise ModelError("capture shorter than one sample interval")
        if not self.pin or not self.pin.startswith("P"):
            raise ModelError(f"bad pin name {self.pin!r}")

    @property
    def sample_count(self) -> int:
        return self.duration_us * self.rate_hz // 1_000_000

    @property
    def sample_interval_us(self) -> float:
        return 1_000_000 / self.rate_hz


@dataclass(frozen=True)
class TestCase:
    id: str
    assignment_id: str
    visibility: Visibility
    weight: float
    grading_script: str  # "builtin:pwm" or a path to an executable
    capture: CaptureConfig
    sessions: tuple[Session, ...]

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise ModelError(f"weight must be positive, got {self.weight}")
        validate_schedule(self.sessions, self.capture.duration_us)


@dataclass(frozen=True)
class Assignment:
    id: str
    course_id: str
    statement: str
    dut_profile: str
    deadline: str  # RFC 3339 UTC


@dataclass(frozen=True)
class Course:
    id: str
    title: str


@dataclass(frozen=True)
class User:
    id: str
    username: str
    display_name: str


@dataclass(frozen=True)
class CompileStatus:
    ok: bool
    message: str = ""

    def to_dict(self) -> dict:
        return {"ok": self.ok, "message": self.message}

    @staticmethod
    def from_dict(d: dict) -> CompileStatus:
        return CompileStatus(ok=bool(d["ok"]), message=str(d.get("message", "")))


@dataclass(frozen=True)
class ArtifactRefs:
    """Relative paths of the files the testbed produced for one test case."""

    schedule: str
    capture: str
    print_log: str

    def to_dict(self) -> dict:
        return {"schedule": self.schedule, "capture": self.capture, "print_log": self.print_log}

    @staticmethod
    def from_dict(d: dict) -> ArtifactRefs:
        return ArtifactRefs(d["schedule"], d["capture"], d["print_log"])

    @staticmethod
    def for_test_case(test_case_id: str) -> ArtifactRefs:
        return ArtifactRefs(
            schedule=f"{test_case_id}/schedule.csv",
            capture=f"{test_case_id}/capture.rle",
            print_log=f"{test_case_id}/print.log",
        )


@dataclass(frozen=True)
class TestCaseResult:
    test_case_id: str
    session_scores: tuple[float, ...]
    score: float  # 0..100, always 100 * mean(session_scores)
    feedback: str
    artifacts: ArtifactRefs
    grader_fault: str | None = None  # instructor-only diagnostics

    def to_dict(self) -> dict:
        d = {
            "test_case_id": self.test_case_id,
            "session_scores": list(self.session_scores),
            "score": self.score,
            "feedback": self.feedback,
            "artifacts": self.artifacts.to_dict(),
        }
        if self.grader_fault is not None:
            d["grader_fault"] = self.grader_fault
        return d

    @staticmethod
    def from_dict(d: dict) -> TestCaseResult:
        return TestCaseResult(
            test_case_id=d["test_case_id"],
            session_scores=tuple(float(s) for s in d["session_scores"]),
            score=float(d["score"]),
            feedback=d["feedback"],
            artifacts=ArtifactRefs.from_dict(d["artifacts"]),
            grader_fault=d.get("grader_fault"),
        )


@dataclass(frozen=True)
class GradeReport:
    compile_status: CompileStatus
    results: tuple[TestCaseResult, ...]
    total: float  # 0..100, weighted over all test cases

    def to_dict(self) -> dict:
        return {
            "compile_status": self.compile_status.to_dict(),
            "results": [r.to_dict() for r in self.results],
            "total": self.total,
        }

    def to_json(self) -> str:
        """Canonical serialization; equal reports give equal bytes."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_dict(d: dict) -> GradeReport:
        return GradeReport(
            compile_status=CompileStatus.from_dict(d["compile_status"]),
            results=tuple(TestCaseResult.from_dict(r) for r in d["results"]),
            total=float(d["total"]),
        )

    @staticmethod
    def from_json(s: str) -> GradeReport:
        return GradeReport.from_dict(json.loads(s))


def build_result(
    test_case_id: str,
    session_scores: tuple[float, ...],
    feedback: str,
    grader_fault: str | None = None,
) -> TestCaseResult:
    """Build a per-test-case result, deriving the 0-100 score from the
    per-session scores so the two can never disagree."""
    for s in session_scores:
        if not 0.0 <= s <= 1.0 or math.isnan(s):
            raise ModelError(f"session score {s} outside [0, 1]")
    score = 100.0 * sum(session_scores) / len(session_scores) if session_scores else 0.0
    return TestCaseResult(
        test_case_id=test_case_id,
        session_scores=session_scores,
        score=score,
        feedback=feedback,
        artifacts=ArtifactRefs.for_test_case(test_case_id),
        grader_fault=grader_fault,
    )


def build_report(
    compile_status: CompileStatus,
    results: tuple[TestCaseResult, ...],
    weights: dict[str, float],
) -> GradeReport:
    """Assemble the full report. A compile error forces every score to 0."""
    if not compile_status.ok:
        for r in results:
            if r.score != 0.0 or any(s != 0.0 for s in r.session_scores):
                raise ModelError("compile error reports must carry zero scores")
    total_weight = sum(weights[r.test_case_id] for r in results)
    total = (
        sum(weights[r.test_case_id] * r.score for r in results) / total_weight
        if total_weight > 0
        else 0.0
    )
    return GradeReport(compile_status=compile_status, results=results, total=total)


# --- submission lifecycle ---------------------------------------------------


@dataclass(frozen=True)
class Claim:
    testbed_id: str
    lease_expires_at: float  # unix seconds


@dataclass(frozen=True)
class StartExecution:
    testbed_id: str


@dataclass(frozen=True)
class Complete:
    testbed_id: str
    report: GradeReport


@dataclass(frozen=True)
class Fail:
    testbed_id: str
    reason: str


@dataclass(frozen=True)
class LeaseExpired:
    pass


LifecycleEvent = Claim | StartExecution | Complete | Fail | LeaseExpired


@dataclass(frozen=True)
class Submission:
    id: str
    assignment_id: str
    student_id: str
    source: str
    submitted_at: str  # RFC 3339 UTC
    state: SubmissionState = SubmissionState.PENDING
    claim_testbed: str | None = None
    lease_expires_at: float | None = None
    attempts: int = 0
    report: GradeReport | None = None
    graded_at: str | None = None
    failure_reason: str | None = None

    def __post_init__(self) -> None:
        if len(self.source.encode()) > MAX_SOURCE_BYTES:
            raise ModelError("source exceeds 64 KiB")
        has_report = self.report is not None
        if has_report != (self.state is SubmissionState.GRADED):
            raise ModelError("report must be present exactly when state is graded")


def _holder_check(sub: Submission, testbed_id: str) -> None:
    if sub.claim_testbed != testbed_id:
        raise StaleClaim(
            f"testbed {testbed_id} does not hold the claim on {sub.id} "
            f"(holder: {sub.claim_testbed})"
        )


def transition(sub: Submission, event: LifecycleEvent) -> Submission:
    """Apply one lifecycle event, returning the updated submission.

    Legal edges only; anything else raises IllegalTransition, and a legal
    edge named by the wrong testbed raises StaleClaim.
    """
    st = sub.state
    if isinstance(event, Claim):
        if st is not SubmissionState.PENDING:
            raise IllegalTransition(f"cannot claim a {st.value} submission")
        return dataclasses.replace(
            sub,
            state=SubmissionState.CLAIMED,
            claim_testbed=event.testbed_id,
            lease_expires_at=event.lease_expires_at,
            attempts=sub.attempts + 1,
        )
    if isinstance(event, StartExecution):
        if st is not SubmissionState.CLAIMED:
            raise IllegalTransition(f"cannot start executing a {st.value} submission")
        _holder_check(sub, event.testbed_id)
        return dataclasses.replace(sub, state=SubmissionState.EXECUTING)
    if isinstance(event, Complete):
        if st is not SubmissionState.EXECUTING:
            raise IllegalTransition(f"cannot complete a {st.value} submission")
        _holder_check(sub, event.testbed_id)
        return dataclasses.replace(
            sub,
            state=SubmissionState.GRADED,
            report=event.report,
            claim_testbed=None,
            lease_expires_at=None,
        )
    if isinstance(event, Fail):
        if st is not SubmissionState.EXECUTING:
            raise IllegalTransition(f"cannot fail a {st.value} submission")
        _holder_check(sub, event.testbed_id)
        return dataclasses.replace(
            sub,
            state=SubmissionState.FAILED,
            failure_reason=event.reason,
            claim_testbed=None,
            lease_expires_at=None,
        )
    if isinstance(event, LeaseExpired):
        if st not in (SubmissionState.CLAIMED, SubmissionState.EXECUTING):
            raise IllegalTransition(f"lease cannot expire on a {st.value} submission")
        return dataclasses.replace(
            sub,
            state=SubmissionState.PENDING,
            claim_testbed=None,
            lease_expires_at=None,
        )
    raise IllegalTransition(f"unknown event {event!r}")
