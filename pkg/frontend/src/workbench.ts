/**
 * Submission workbench view model.
 *
 * Turns raw submission views into what the page shows: a history list with
 * the newest attempt on top, a spinner while a submission is still moving
 * through the queue, and per-case rows whose artifact links exist only when
 * the server actually exposed those artifacts.
 */

import { CaseEntry, isFullEntry, SubmissionState, SubmissionView } from "./api.js";

export type StatusLabel = "in queue" | "grading" | "graded" | "failed";

export interface CaseRow {
  testCaseId: string;
  score: number;
  /** Null for score-only entries (semi-public cases before the deadline). */
  feedback: string | null;
  sessionScores: number[] | null;
  graderFault: string | null;
  waveformHref: string | null;
  scheduleHref: string | null;
  printLogHref: string | null;
}

export interface HistoryRow {
  submissionId: string;
  submittedAt: string;
  status: StatusLabel;
  /** True while the submission has not reached a terminal state. */
  spinner: boolean;
  total: number | null;
  complete: boolean | null;
  compileMessage: string | null;
  failureReason: string | null;
  cases: CaseRow[];
}

export interface WorkbenchViewModel {
  assignmentId: string;
  rows: HistoryRow[];
}

export function statusOf(state: SubmissionState): StatusLabel {
  switch (state) {
    case "pending":
      return "in queue";
    case "claimed":
    case "executing":
      return "grading";
    case "graded":
      return "graded";
    case "failed":
      return "failed";
  }
}

function artifactHref(baseUrl: string, submissionId: string, ref: string): string {
  const base = baseUrl.replace(/\/+$/, "");
  return `${base}/submissions/${encodeURIComponent(submissionId)}/artifacts/${ref}`;
}

export function buildCaseRow(baseUrl: string, submissionId: string, entry: CaseEntry): CaseRow {
  if (isFullEntry(entry)) {
    return {
      testCaseId: entry.test_case_id,
      score: entry.score,
      feedback: entry.feedback,
      sessionScores: entry.session_scores,
      graderFault: entry.grader_fault ?? null,
      waveformHref: artifactHref(baseUrl, submissionId, entry.artifacts.capture),
      scheduleHref: artifactHref(baseUrl, submissionId, entry.artifacts.schedule),
      printLogHref: artifactHref(baseUrl, submissionId, entry.artifacts.print_log),
    };
  }
  return {
    testCaseId: entry.test_case_id,
    score: entry.score,
    feedback: null,
    sessionScores: null,
    graderFault: null,
    waveformHref: null,
    scheduleHref: null,
    printLogHref: null,
  };
}

export function buildHistoryRow(baseUrl: string, view: SubmissionView): HistoryRow {
  const status = statusOf(view.state);
  const report = view.report;
  return {
    submissionId: view.submission_id,
    submittedAt: view.submitted_at,
    status,
    spinner: status === "in queue" || status === "grading",
    total: report ? report.total : null,
    complete: report ? report.complete : null,
    compileMessage: report && !report.compile_status.ok ? report.compile_status.message : null,
    failureReason: view.failure_reason ?? null,
    cases: report ? report.results.map((e) => buildCaseRow(baseUrl, view.submission_id, e)) : [],
  };
}

/** All of a student's attempts for one assignment, newest first. */
export function buildWorkbench(
  baseUrl: string,
  assignmentId: string,
  views: SubmissionView[],
): WorkbenchViewModel {
  const rows = views
    .filter((v) => v.assignment_id === assignmentId)
    .map((v) => buildHistoryRow(baseUrl, v))
    .sort((a, b) => b.submittedAt.localeCompare(a.submittedAt));
  return { assignmentId, rows };
}
