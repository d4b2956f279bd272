"""Visibility filtering: what each caller may see of a grade report.

The rule table, exhaustively exercised by the tests:

    role        visibility    before deadline              after deadline
    ----------  -----------   --------------------------   --------------
    instructor  public        everything                   everything
    instructor  semi_public   everything                   everything
    instructor  hidden        everything                   everything
    student     public        score, feedback, artifacts   everything
    student     semi_public   score only                   everything
    student     hidden        entry absent                 everything

Grader-fault diagnostics stay instructor-only on both sides of the deadline:
they describe the instructor's script, not the student's work. The filtered
total is recomputed over the entries the caller can see, so a hidden test
case's score can never be reverse-engineered from the total.
"""
from __future__ import annotations

from .model import GradeReport, Role, TestCaseResult, Visibility


def _full_entry(r: TestCaseResult, include_fault: bool) -> dict:
    d = {
        "test_case_id": r.test_case_id,
        "session_scores": list(r.session_scores),
        "score": r.score,
        "feedback": r.feedback,
        "artifacts": r.artifacts.to_dict(),
    }
    if include_fault and r.grader_fault is not None:
        d["grader_fault"] = r.grader_fault
    return d


def _score_only_entry(r: TestCaseResult) -> dict:
    return {"test_case_id": r.test_case_id, "score": r.score}


def visible_entry(
    result: TestCaseResult,
    role: Role,
    visibility: Visibility,
    past_deadline: bool,
) -> dict | None:
    """One cell of the rule table; None means the entry is withheld."""
    if role is Role.INSTRUCTOR:
        return _full_entry(result, include_fault=True)
    if past_deadline:
        return _full_entry(result, include_fault=False)
    if visibility is Visibility.PUBLIC:
        return _full_entry(result, include_fault=False)
    if visibility is Visibility.SEMI_PUBLIC:
        return _score_only_entry(result)
    return None  # hidden, pre-deadline


def visible_view(
    report: GradeReport,
    role: Role,
    visibility_by_case: dict[str, Visibility],
    weight_by_case: dict[str, float],
    past_deadline: bool,
) -> dict:
    """Filter a grade report for one caller.

    Test cases missing from the visibility map are treated as hidden; that
    can only happen through store corruption and hiding is the safe default.
    """
    entries = []
    visible_results = []
    for r in report.results:
        vis = visibility_by_case.get(r.test_case_id, Visibility.HIDDEN)
        entry = visible_entry(r, role, vis, past_deadline)
        if entry is not None:
            entries.append(entry)
            visible_results.append(r)
    total_weight = sum(weight_by_case.get(r.test_case_id, 1.0) for r in visible_results)
    total = (
        sum(weight_by_case.get(r.test_case_id, 1.0) * r.score for r in visible_results)
        / total_weight
        if total_weight > 0
        else 0.0
    )
    return {
        "compile_status": report.compile_status.to_dict(),
        "results": entries,
        "total": total,
        "complete": len(entries) == len(report.results),
    }


def artifact_visible(role: Role, visibility: Visibility, past_deadline: bool) -> bool:
    """Whether the caller may download a test case's artifact files."""
    if role is Role.INSTRUCTOR or past_deadline:
        return True
    return visibility is Visibility.PUBLIC


def visible_total(
    report: GradeReport,
    visibility_by_case: dict[str, Visibility],
    weight_by_case: dict[str, float],
    past_deadline: bool,
    include_hidden: bool = False,
) -> float:
    """The score shown in progression overviews.

    Before the deadline only public and semi-public cases count, unless the
    instructor explicitly toggles hidden-inclusive scores.
    """
    if past_deadline or include_hidden:
        return report.total
    counted = [
        r
        for r in report.results
        if visibility_by_case.get(r.test_case_id, Visibility.HIDDEN)
        is not Visibility.HIDDEN
    ]
    total_weight = sum(weight_by_case.get(r.test_case_id, 1.0) for r in counted)
    if total_weight <= 0:
        return 0.0
    return sum(weight_by_case.get(r.test_case_id, 1.0) * r.score for r in counted) / total_weight
