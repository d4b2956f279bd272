/**
 * Waveform view model.
 *
 * Built from RLE runs, never from expanded samples: each run becomes one
 * horizontal segment, so the plot carries exactly as many transitions as the
 * capture decodes to. Zooming just narrows the visible window and clips
 * segments at its edges; it cannot invent detail the capture does not have.
 */

import { Capture, SessionSpec, transitionCount } from "./capture.js";

export interface Segment {
  level: 0 | 1;
  startUs: number;
  endUs: number;
}

export interface SessionBand {
  startUs: number;
  endUs: number;
  label: string;
  /** True when this session scored below full credit and should be shaded. */
  shaded: boolean;
}

export interface Window {
  startUs: number;
  endUs: number;
}

export interface HoverInfo {
  level: 0 | 1;
  startUs: number;
  endUs: number;
  durationUs: number;
}

export interface WaveformViewModel {
  segments: Segment[];
  transitionsUs: number[];
  transitionCount: number;
  bands: SessionBand[];
  window: Window;
  extentUs: number;
  /** Set when there is nothing to plot but a flat low line. */
  annotation: string | null;
}

export function buildWaveform(
  capture: Capture,
  sessions: SessionSpec[] = [],
  sessionScores: number[] = [],
): WaveformViewModel {
  const intervalUs = 1_000_000 / capture.rateHz;
  const segments: Segment[] = [];
  const transitionsUs: number[] = [];
  let cursor = 0;
  for (const run of capture.runs) {
    const startUs = cursor * intervalUs;
    cursor += run.length;
    const endUs = cursor * intervalUs;
    if (segments.length > 0) transitionsUs.push(startUs);
    segments.push({ level: run.level, startUs, endUs });
  }
  const extentUs = cursor * intervalUs;
  const bands = sessions.map((sess, i) => {
    const endUs = i + 1 < sessions.length ? sessions[i + 1]!.startUs : extentUs;
    const score = sessionScores[i];
    return {
      startUs: sess.startUs,
      endUs,
      label: `${sess.periodUs} us @ ${sess.dutyPct}%`,
      shaded: score !== undefined && score < 1.0,
    };
  });
  const flat = capture.runs.length === 1 && capture.runs[0]!.level === 0;
  return {
    segments,
    transitionsUs,
    transitionCount: transitionCount(capture),
    bands,
    window: { startUs: 0, endUs: extentUs },
    extentUs,
    annotation: flat ? "no signal" : null,
  };
}

/** Narrow the visible window; clamped to the capture extent. */
export function zoomTo(vm: WaveformViewModel, startUs: number, endUs: number): WaveformViewModel {
  const lo = Math.max(0, Math.min(startUs, endUs));
  const hi = Math.min(vm.extentUs, Math.max(startUs, endUs));
  return { ...vm, window: { startUs: lo, endUs: hi } };
}

/** Segments overlapping the current window, clipped at its edges. */
export function visibleSegments(vm: WaveformViewModel): Segment[] {
  const out: Segment[] = [];
  for (const seg of vm.segments) {
    if (seg.endUs <= vm.window.startUs || seg.startUs >= vm.window.endUs) continue;
    out.push({
      level: seg.level,
      startUs: Math.max(seg.startUs, vm.window.startUs),
      endUs: Math.min(seg.endUs, vm.window.endUs),
    });
  }
  return out;
}

/** The run under the cursor, or null when outside the capture. */
export function hoverAt(vm: WaveformViewModel, tUs: number): HoverInfo | null {
  if (tUs < 0 || tUs >= vm.extentUs) return null;
  for (const seg of vm.segments) {
    if (tUs >= seg.startUs && tUs < seg.endUs) {
      return {
        level: seg.level,
        startUs: seg.startUs,
        endUs: seg.endUs,
        durationUs: seg.endUs - seg.startUs,
      };
    }
  }
  return null;
}
