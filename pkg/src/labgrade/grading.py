"""Grading runner: applies the instructor's grading script to one test case.

The script is either the string ``builtin:pwm`` (measure and score the PWM
capture in-process) or a path to an executable. External scripts get the
artifact directory as argv[1] and working directory, must exit 0, and must
write ``result.json`` = {"score": number, "feedback": string, "sessions":
[numbers in 0..1]} into that directory. Session scores are authoritative:
when present, the 0-100 score is recomputed as 100 x their mean so a report
can never carry inconsistent numbers.
"""
from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass
from pathlib import Path

from . import analysis, engine
from .model import TestCaseResult, build_result

BUILTIN_PWM = "builtin:pwm"
ARTIFACT_FILES = ("schedule.csv", "capture.rle", "print.log")
GRADER_FAULT_FEEDBACK = "grading error, instructor notified"


class GradingError(Exception):
    pass


class ScriptTimeout(GradingError):
    pass


class ScriptCrashed(GradingError):
    def __init__(self, exit_code: int, detail: str = ""):
        super().__init__(f"grading script exited with code {exit_code}: {detail}")
        self.exit_code = exit_code


class ScriptMalformedOutput(GradingError):
    pass


@dataclass(frozen=True)
class GradingInvocation:
    script: str
    artifact_dir: Path
    timeout_s: float = 30.0
    max_output_bytes: int = 64 * 1024

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise GradingError("timeout must be positive")
        present = sorted(p.name for p in self.artifact_dir.iterdir() if p.is_file())
        if present != sorted(ARTIFACT_FILES):
            raise GradingError(
                f"artifact dir must contain exactly {ARTIFACT_FILES}, found {present}"
            )


@dataclass(frozen=True)
class GradingOutcome:
    score: float  # 0..100
    feedback: str
    session_scores: tuple[float, ...]


def _feedback_line(
    index: int, expected, measured: analysis.SessionMeasurement, score: float
) -> str:
    if expected.duty in (0.0, 1.0):
        level = "high" if expected.duty == 1.0 else "low"
        return (
            f"session {index}: expected constant {level}, "
            f"fraction at level {score:.4g}, score {score:.4g}"
        )
    if measured.mean_period_us is None:
        return f"session {index}: no output signal detected"
    return (
        f"session {index}: expected period {expected.period_us} us duty "
        f"{expected.duty:.4g}, measured period {measured.mean_period_us:.6g} us "
        f"duty {measured.mean_duty:.4g}, score {score:.4g}"
    )


def grade_builtin_pwm(
    artifact_dir: Path, config: analysis.AnalysisConfig = analysis.DEFAULT_CONFIG
) -> GradingOutcome:
    """Measure the capture against its schedule and score every session."""
    capture = engine.read_capture((artifact_dir / "capture.rle").read_text())
    sessions = engine.read_schedule((artifact_dir / "schedule.csv").read_text())
    measurement = analysis.measure_pwm(capture, sessions, config)
    scores = []
    lines = []
    for i, (sess, meas) in enumerate(zip(sessions, measurement.sessions)):
        s = analysis.score_session(meas, sess, capture.sample_interval_us, config)
        scores.append(s)
        if s < 1.0:
            lines.append(_feedback_line(i, sess, meas, s))
    feedback = "all sessions within tolerance" if not lines else "\n".join(lines)
    score = 100.0 * sum(scores) / len(scores) if scores else 0.0
    return GradingOutcome(score=score, feedback=feedback, session_scores=tuple(scores))


def _run_external(inv: GradingInvocation) -> GradingOutcome:
    result_path = inv.artifact_dir / "result.json"
    try:
        proc = subprocess.run(
            [inv.script, str(inv.artifact_dir)],
            cwd=inv.artifact_dir,
            capture_output=True,
            timeout=inv.timeout_s,
        )
    except subprocess.TimeoutExpired:
        raise ScriptTimeout(f"grading script exceeded {inv.timeout_s} s") from None
    except OSError as e:
        raise ScriptCrashed(-1, str(e)) from e
    if proc.returncode != 0:
        detail = proc.stderr[: inv.max_output_bytes].decode(errors="replace")
        raise ScriptCrashed(proc.returncode, detail.strip())
    if not result_path.is_file():
        raise ScriptMalformedOutput("script did not write result.json")
    raw = result_path.read_bytes()
    if len(raw) > inv.max_output_bytes:
        raise ScriptMalformedOutput("result.json exceeds the 64 KiB output cap")
    try:
        data = json.loads(raw)
    except ValueError as e:
        raise ScriptMalformedOutput(f"result.json is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ScriptMalformedOutput("result.json must be a JSON object")
    score = data.get("score")
    feedback = data.get("feedback")
    sessions = data.get("sessions")
    if not isinstance(score, (int, float)) or not 0 <= score <= 100:
        raise ScriptMalformedOutput(f"score must be a number in [0, 100], got {score!r}")
    if not isinstance(feedback, str):
        raise ScriptMalformedOutput("feedback must be a string")
    if not isinstance(sessions, list) or not all(
        isinstance(s, (int, float)) and 0 <= s <= 1 for s in sessions
    ):
        raise ScriptMalformedOutput("sessions must be a list of numbers in [0, 1]")
    session_scores = tuple(float(s) for s in sessions)
    if not session_scores:
        session_scores = (float(score) / 100.0,)
    return GradingOutcome(
        score=100.0 * sum(session_scores) / len(session_scores),
        feedback=feedback,
        session_scores=session_scores,
    )


def run_grading(inv: GradingInvocation) -> GradingOutcome:
    """Run the configured grading script over one artifact directory."""
    if inv.script == BUILTIN_PWM:
        return grade_builtin_pwm(inv.artifact_dir)
    script_path = Path(inv.script)
    if not script_path.is_file():
        raise ScriptCrashed(-1, f"grading script {inv.script!r} not found")
    return _run_external(inv)


def grade_test_case(
    test_case_id: str,
    script: str,
    artifact_dir: Path,
    timeout_s: float = 30.0,
) -> TestCaseResult:
    """Grade one test case, mapping grader faults to a zero-score entry.

    A fault in the instructor's script must not read as an earned zero: the
    student sees a generic message while the detail is kept in the
    instructor-only grader_fault field.
    """
    try:
        inv = GradingInvocation(script=script, artifact_dir=artifact_dir, timeout_s=timeout_s)
        outcome = run_grading(inv)
    except GradingError as e:
        return build_result(
            test_case_id,
            session_scores=(0.0,),
            feedback=GRADER_FAULT_FEEDBACK,
            grader_fault=f"{type(e).__name__}: {e}",
        )
    return build_result(
        test_case_id,
        session_scores=outcome.session_scores,
        feedback=outcome.feedback,
    )
