/**
 * Parsers for the testbed file formats.
 *
 * capture.rle: header "rate_hz,duration_us,pin,profile_id", then one
 * "level,length" line per run. Runs alternate level, lengths are >= 1, and
 * they must cover exactly the sample count the header implies.
 *
 * schedule.csv: header "start_us,period_us,duty_pct", then integer rows.
 */

export class ParseError extends Error {}

export interface Run {
  level: 0 | 1;
  length: number;
}

export interface Capture {
  rateHz: number;
  durationUs: number;
  pin: string;
  profileId: string;
  runs: Run[];
}

export interface SessionSpec {
  startUs: number;
  periodUs: number;
  dutyPct: number;
}

function intField(raw: string, what: string): number {
  if (!/^-?\d+$/.test(raw)) throw new ParseError(`${what}: expected an integer, got "${raw}"`);
  return parseInt(raw, 10);
}

export function sampleCount(c: Capture): number {
  return Math.floor((c.durationUs * c.rateHz) / 1_000_000);
}

export function transitionCount(c: Capture): number {
  return Math.max(0, c.runs.length - 1);
}

export function parseCapture(text: string): Capture {
  const lines = text.split("\n").filter((ln) => ln.trim() !== "");
  if (lines.length === 0) throw new ParseError("empty capture file");
  const head = lines[0]!.split(",");
  if (head.length !== 4) throw new ParseError(`bad capture header "${lines[0]}"`);
  const cap: Capture = {
    rateHz: intField(head[0]!, "rate_hz"),
    durationUs: intField(head[1]!, "duration_us"),
    pin: head[2]!,
    profileId: head[3]!,
    runs: [],
  };
  let covered = 0;
  let prev: number | null = null;
  for (const ln of lines.slice(1)) {
    const parts = ln.split(",");
    if (parts.length !== 2) throw new ParseError(`bad run line "${ln}"`);
    const level = intField(parts[0]!, "run level");
    const length = intField(parts[1]!, "run length");
    if (level !== 0 && level !== 1) throw new ParseError(`run level must be 0 or 1, got ${level}`);
    if (length < 1) throw new ParseError(`run length must be >= 1, got ${length}`);
    if (prev !== null && prev === level) throw new ParseError("adjacent runs must alternate level");
    prev = level;
    covered += length;
    cap.runs.push({ level, length });
  }
  if (cap.runs.length === 0) throw new ParseError("capture has no runs");
  const expected = sampleCount(cap);
  if (covered !== expected) {
    throw new ParseError(`runs cover ${covered} samples, header implies ${expected}`);
  }
  return cap;
}

/** Expand runs back into samples; only used by audits, plots render runs. */
export function decodeRuns(runs: Run[]): (0 | 1)[] {
  const out: (0 | 1)[] = [];
  for (const run of runs) {
    for (let i = 0; i < run.length; i++) out.push(run.level);
  }
  return out;
}

export function parseSchedule(text: string): SessionSpec[] {
  const lines = text.split("\n").filter((ln) => ln.trim() !== "");
  if (lines.length === 0 || lines[0] !== "start_us,period_us,duty_pct") {
    throw new ParseError("bad schedule header");
  }
  const sessions: SessionSpec[] = [];
  for (const ln of lines.slice(1)) {
    const parts = ln.split(",");
    if (parts.length !== 3) throw new ParseError(`bad schedule row "${ln}"`);
    sessions.push({
      startUs: intField(parts[0]!, "start_us"),
      periodUs: intField(parts[1]!, "period_us"),
      dutyPct: intField(parts[2]!, "duty_pct"),
    });
  }
  return sessions;
}
