/**
 * Class overview heatmap.
 *
 * One row per student, one cell per submission, ordered by submission time.
 * Cell color is a pure function of score: hue runs 0 (red, score 0) to 120
 * (green, score 100), so higher scores always map to greener cells.
 */

import { Overview } from "./api.js";

export interface HeatCell {
  submissionId: string;
  submittedAt: string;
  state: string;
  score: number | null;
  /** hsl() color, or null while the submission has no score yet. */
  color: string | null;
}

export interface HeatRow {
  studentId: string;
  cells: HeatCell[];
  bestScore: number | null;
}

export interface HeatmapViewModel {
  assignmentId: string;
  includeHidden: boolean;
  rows: HeatRow[];
}

export function scoreHue(score: number): number {
  return Math.min(100, Math.max(0, score)) * 1.2;
}

export function scoreColor(score: number): string {
  return `hsl(${scoreHue(score).toFixed(1)}, 70%, 45%)`;
}

export function buildHeatmap(overview: Overview): HeatmapViewModel {
  const rows = overview.students.map((student) => {
    const cells = [...student.points]
      .sort((a, b) => a.submitted_at.localeCompare(b.submitted_at))
      .map((pt) => ({
        submissionId: pt.submission_id,
        submittedAt: pt.submitted_at,
        state: pt.state,
        score: pt.score,
        color: pt.score === null ? null : scoreColor(pt.score),
      }));
    const scored = cells.map((c) => c.score).filter((s): s is number => s !== null);
    return {
      studentId: student.student_id,
      cells,
      bestScore: scored.length > 0 ? Math.max(...scored) : null,
    };
  });
  return { assignmentId: overview.assignment_id, includeHidden: overview.include_hidden, rows };
}
