/**
 * Typed client for the grading server REST API.
 *
 * Every call goes through one fetch wrapper so auth headers, error mapping
 * and JSON decoding live in a single place. The fetch function is injectable
 * so tests can stub the network.
 */

export type Fetcher = (url: string, init?: RequestInit) => Promise<Response>;

export interface ClientOptions {
  baseUrl: string;
  token?: string;
  fetchFn?: Fetcher;
}

/** Server errors arrive as {"error": code, "detail": text}. */
export class ApiError extends Error {
  readonly status: number;
  readonly code: string;

  constructor(status: number, code: string, detail: string) {
    super(detail);
    this.status = status;
    this.code = code;
  }
}

export interface CompileStatus {
  ok: boolean;
  message: string;
}

export interface ArtifactRefs {
  schedule: string;
  capture: string;
  print_log: string;
}

/**
 * One test case row of a filtered report. Score-only entries (semi-public
 * cases before the deadline) carry nothing beyond the id and score; the
 * server never sends fields the caller may not see, and this client never
 * invents them.
 */
export interface CaseEntry {
  test_case_id: string;
  score: number;
  feedback?: string;
  session_scores?: number[];
  artifacts?: ArtifactRefs;
  grader_fault?: string;
}

export interface FullCaseEntry extends CaseEntry {
  feedback: string;
  session_scores: number[];
  artifacts: ArtifactRefs;
}

export function isFullEntry(entry: CaseEntry): entry is FullCaseEntry {
  return entry.artifacts !== undefined;
}

export interface FilteredReport {
  compile_status: CompileStatus;
  results: CaseEntry[];
  total: number;
  complete: boolean;
}

export type SubmissionState = "pending" | "claimed" | "executing" | "graded" | "failed";

export interface SubmissionView {
  submission_id: string;
  assignment_id: string;
  state: SubmissionState;
  submitted_at: string;
  graded_at: string | null;
  report: FilteredReport | null;
  failure_reason?: string;
}

export interface OverviewPoint {
  submission_id: string;
  submitted_at: string;
  state: SubmissionState;
  score: number | null;
}

export interface OverviewRow {
  student_id: string;
  points: OverviewPoint[];
}

export interface Overview {
  assignment_id: string;
  include_hidden: boolean;
  students: OverviewRow[];
}

export type ArtifactFile = "capture.rle" | "schedule.csv" | "print.log";

export class GradingClient {
  private readonly base: string;
  private readonly fetchFn: Fetcher;
  private token: string | null;

  constructor(opts: ClientOptions) {
    this.base = opts.baseUrl.replace(/\/+$/, "");
    this.fetchFn = opts.fetchFn ?? ((url, init) => fetch(url, init));
    this.token = opts.token ?? null;
  }

  private headers(json: boolean): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h["Content-Type"] = "application/json";
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  private async raise(res: Response): Promise<never> {
    let code = "unknown";
    let detail = `HTTP ${res.status}`;
    try {
      const body = await res.json();
      if (typeof body.error === "string") code = body.error;
      if (typeof body.detail === "string") detail = body.detail;
    } catch {
      // non-JSON error body; keep the generic detail
    }
    throw new ApiError(res.status, code, detail);
  }

  private async requestJson<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: this.headers(body !== undefined) };
    if (body !== undefined) init.body = JSON.stringify(body);
    const res = await this.fetchFn(this.base + path, init);
    if (!res.ok) await this.raise(res);
    return (await res.json()) as T;
  }

  async register(username: string, password: string): Promise<string> {
    const out = await this.requestJson<{ user_id: string }>("POST", "/auth/register", {
      username,
      password,
    });
    return out.user_id;
  }

  /** Logs in and keeps the bearer token for every later call. */
  async login(username: string, password: string): Promise<string> {
    const out = await this.requestJson<{ token: string }>("POST", "/auth/login", {
      username,
      password,
    });
    this.token = out.token;
    return out.token;
  }

  async submit(assignmentId: string, source: string): Promise<string> {
    const out = await this.requestJson<{ submission_id: string }>(
      "POST",
      `/assignments/${encodeURIComponent(assignmentId)}/submissions`,
      { source },
    );
    return out.submission_id;
  }

  async getSubmission(submissionId: string): Promise<SubmissionView> {
    return this.requestJson<SubmissionView>(
      "GET",
      `/submissions/${encodeURIComponent(submissionId)}`,
    );
  }

  async overview(assignmentId: string, includeHidden = false): Promise<Overview> {
    const query = includeHidden ? "?include_hidden=true" : "";
    return this.requestJson<Overview>(
      "GET",
      `/assignments/${encodeURIComponent(assignmentId)}/overview${query}`,
    );
  }

  /** Raw artifact text (capture.rle / schedule.csv); print.log may be binary. */
  async artifactText(
    submissionId: string,
    testCaseId: string,
    file: ArtifactFile,
  ): Promise<string> {
    const path =
      `/submissions/${encodeURIComponent(submissionId)}` +
      `/artifacts/${encodeURIComponent(testCaseId)}/${file}`;
    const res = await this.fetchFn(this.base + path, {
      method: "GET",
      headers: this.headers(false),
    });
    if (!res.ok) await this.raise(res);
    return res.text();
  }
}

export interface PollOptions {
  intervalMs?: number;
  timeoutMs?: number;
  onUpdate?: (view: SubmissionView) => void;
  sleepFn?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

/**
 * Poll a submission until it reaches a terminal state (graded / failed).
 * onUpdate fires on every poll, which is how a page keeps its spinner and
 * history row fresh while the queue drains.
 */
export async function pollSubmission(
  client: GradingClient,
  submissionId: string,
  opts: PollOptions = {},
): Promise<SubmissionView> {
  const intervalMs = opts.intervalMs ?? 500;
  const timeoutMs = opts.timeoutMs ?? 120_000;
  const sleep = opts.sleepFn ?? defaultSleep;
  const startedAt = Date.now();
  for (;;) {
    const view = await client.getSubmission(submissionId);
    opts.onUpdate?.(view);
    if (view.state === "graded" || view.state === "failed") return view;
    if (Date.now() - startedAt > timeoutMs) {
      throw new Error(`submission ${submissionId} still ${view.state} after ${timeoutMs} ms`);
    }
    await sleep(intervalMs);
  }
}
