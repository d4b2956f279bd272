"""Load generator: latency and throughput scaling against a live server.

Fires N identical submissions at once, waits for every one to reach a
terminal state, and computes latency (graded_at minus submitted_at, both
server timestamps) and throughput (graded jobs per second of grading
wallclock). Repeats over a grid of N values and testbed counts T, fits
mean latency against N per T, and writes two CSV files:

  latency.csv     n,testbeds,mean_s,median_s,p95_s
  throughput.csv  n,testbeds,jobs_per_s

p95 is nearest-rank. The bench provisions its own instructor, student,
course, assignment, and test case, so it only needs a fresh server URL.
Coordinators either run already (launched with the same service delay,
verified via their descriptors) or are spawned in-process per T with
--spawn, which also needs --testbed-token.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import secrets
import statistics
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .firmware import HARDWARE_PWM
from .store import parse_rfc3339

FAR_DEADLINE = "2099-01-01T00:00:00+00:00"


class BenchAborted(Exception):
    """Any submission failed, or the fleet does not match the config."""


@dataclass(frozen=True)
class BenchConfig:
    server_url: str
    n_values: tuple[int, ...]
    testbed_counts: tuple[int, ...]
    delay_s: float = 0.3
    reps: int = 1
    out_dir: Path = Path("bench-out")
    source: str = HARDWARE_PWM
    dut_profile: str = "dut-v1"
    poll_interval_s: float = 0.2
    run_timeout_s: float = 600.0
    spawn: bool = False
    testbed_token: str = ""

    def __post_init__(self) -> None:
        if not self.n_values or not self.testbed_counts:
            raise ValueError("need at least one N and one T")
        if any(n < 1 for n in self.n_values) or any(t < 1 for t in self.testbed_counts):
            raise ValueError("N and T must be positive")
        if self.spawn and not self.testbed_token:
            raise ValueError("--spawn needs --testbed-token")


@dataclass(frozen=True)
class RunMetrics:
    n: int
    testbeds: int
    latencies_s: tuple[float, ...]
    throughput_jobs_per_s: float

    @property
    def mean_s(self) -> float:
        return statistics.fmean(self.latencies_s)

    @property
    def median_s(self) -> float:
        return statistics.median(self.latencies_s)

    @property
    def p95_s(self) -> float:
        ordered = sorted(self.latencies_s)
        rank = max(1, -(-95 * len(ordered) // 100))  # nearest-rank, 1-based
        return ordered[rank - 1]


@dataclass(frozen=True)
class LinearFit:
    testbeds: int
    slope_s_per_job: float
    intercept_s: float
    r_squared: float


@dataclass(frozen=True)
class BenchResult:
    runs: tuple[RunMetrics, ...]
    fits: tuple[LinearFit, ...] = field(default=())

    def run_for(self, n: int, t: int) -> RunMetrics:
        for r in self.runs:
            if r.n == n and r.testbeds == t:
                return r
        raise KeyError(f"no run for N={n}, T={t}")

    def fit_for(self, t: int) -> LinearFit:
        for f in self.fits:
            if f.testbeds == t:
                return f
        raise KeyError(f"no fit for T={t}")


def _check(resp: httpx.Response, expect: int, what: str) -> dict:
    if resp.status_code != expect:
        raise BenchAborted(f"{what}: HTTP {resp.status_code} {resp.text[:200]}")
    return resp.json() if resp.content else {}


class _Client:
    """Self-provisioned accounts plus submission helpers against one server."""

    def __init__(self, cfg: BenchConfig):
        self.cfg = cfg
        self.base = cfg.server_url.rstrip("/")
        self.http = httpx.Client(timeout=30.0)
        tag = secrets.token_hex(4)
        self.instructor_token = self._register_and_login(f"bench-instructor-{tag}")[1]
        self.student_id, self.student_token = self._register_and_login(f"bench-student-{tag}")
        course = _check(
            self._post("/courses", {"title": f"bench course {tag}"}, self.instructor_token),
            201,
            "create course",
        )
        _check(
            self._post(
                f"/courses/{course['course_id']}/roster",
                {"user_id": self.student_id, "role": "student"},
                self.instructor_token,
            ),
            200,
            "enroll student",
        )
        assignment = _check(
            self._post(
                f"/courses/{course['course_id']}/assignments",
                {
                    "statement": "bench reference assignment",
                    "dut_profile": cfg.dut_profile,
                    "deadline": FAR_DEADLINE,
                },
                self.instructor_token,
            ),
            201,
            "create assignment",
        )
        self.assignment_id = assignment["assignment_id"]
        _check(
            self._post(
                f"/assignments/{self.assignment_id}/testcases",
                {
                    "visibility": "public",
                    "weight": 1.0,
                    "grading_script": "builtin:pwm",
                    "capture": {"rate_hz": 5000, "duration_us": 20_000, "pin": "P0"},
                    "sessions": [{"start_us": 0, "period_us": 1000, "duty": 0.5}],
                },
                self.instructor_token,
            ),
            201,
            "create test case",
        )

    def _post(self, path: str, body: dict, token: str | None = None) -> httpx.Response:
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        return self.http.post(f"{self.base}{path}", json=body, headers=headers)

    def _get(self, path: str, token: str) -> httpx.Response:
        return self.http.get(f"{self.base}{path}", headers={"Authorization": f"Bearer {token}"})

    def _register_and_login(self, username: str) -> tuple[str, str]:
        password = secrets.token_hex(8)
        user = _check(
            self._post("/auth/register", {"username": username, "password": password}),
            201,
            "register",
        )
        login = _check(
            self._post("/auth/login", {"username": username, "password": password}),
            200,
            "login",
        )
        return user["user_id"], login["token"]

    def online_testbeds(self) -> list[dict]:
        body = _check(self._get("/testbeds", self.student_token), 200, "list testbeds")
        return [t for t in body["testbeds"] if t["online"]]

    def submit_one(self) -> str:
        body = _check(
            self._post(
                f"/assignments/{self.assignment_id}/submissions",
                {"source": self.cfg.source},
                self.student_token,
            ),
            202,
            "submit",
        )
        return body["submission_id"]

    def get_submission(self, submission_id: str) -> dict:
        return _check(
            self._get(f"/submissions/{submission_id}", self.student_token),
            200,
            "poll submission",
        )


def _verify_fleet(client: _Client, t: int, delay_s: float, profile: str) -> None:
    online = client.online_testbeds()
    matching = [
        tb
        for tb in online
        if abs(tb["descriptor"].get("service_delay_s", -1) - delay_s) < 1e-9
        and tb["descriptor"].get("dut_profile") == profile
    ]
    if len(online) != t or len(matching) != t:
        raise BenchAborted(
            f"need exactly {t} online testbeds with service_delay_s={delay_s} "
            f"and profile {profile}; found {len(matching)} matching of {len(online)} online"
        )


def _run_cell(client: _Client, n: int, t: int, cfg: BenchConfig) -> RunMetrics:
    with concurrent.futures.ThreadPoolExecutor(max_workers=min(n, 32)) as pool:
        ids = list(pool.map(lambda _i: client.submit_one(), range(n)))
    outstanding = set(ids)
    submitted: dict[str, float] = {}
    graded: dict[str, float] = {}
    deadline = time.monotonic() + cfg.run_timeout_s
    while outstanding:
        if time.monotonic() > deadline:
            raise BenchAborted(f"timed out with {len(outstanding)} jobs not terminal")
        for sid in sorted(outstanding):
            view = client.get_submission(sid)
            if view["state"] == "failed":
                raise BenchAborted(f"submission {sid} failed")
            if view["state"] == "graded":
                submitted[sid] = parse_rfc3339(view["submitted_at"])
                graded[sid] = parse_rfc3339(view["graded_at"])
                outstanding.discard(sid)
        if outstanding:
            time.sleep(cfg.poll_interval_s)
    latencies = tuple(graded[sid] - submitted[sid] for sid in ids)
    span = max(graded.values()) - min(submitted.values())
    if span <= 0:
        span = 1e-9
    return RunMetrics(n=n, testbeds=t, latencies_s=latencies, throughput_jobs_per_s=n / span)


def _fit(runs: list[RunMetrics], t: int) -> LinearFit | None:
    cells = sorted((r for r in runs if r.testbeds == t), key=lambda r: r.n)
    if len({r.n for r in cells}) < 2:
        return None
    xs = np.array([r.n for r in cells], dtype=float)
    ys = np.array([r.mean_s for r in cells], dtype=float)
    slope, intercept = np.polyfit(xs, ys, 1)
    predicted = slope * xs + intercept
    ss_res = float(np.sum((ys - predicted) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LinearFit(t, float(slope), float(intercept), r_squared)


class _SpawnedFleet:
    """In-process coordinators for --spawn mode.

    Heartbeats start with the app lifespan, so simply hosting each app is
    enough for the server to discover the fleet.
    """

    def __init__(self, cfg: BenchConfig, t: int):
        from .coordinator import CoordinatorConfig, create_app
        from .webhost import ThreadedServer, free_port

        self._servers: list[ThreadedServer] = []
        self._tmp = tempfile.TemporaryDirectory(prefix="labgrade-bench-tb-")
        for i in range(t):
            port = free_port()
            ini = Path(self._tmp.name) / f"tb{i}.ini"
            ini.write_text(
                "[testbed]\n"
                f"id = bench-tb-{i}\n"
                f"dut_profile = {cfg.dut_profile}\n"
                "max_sample_rate_hz = 1000000\n"
                "[wiring]\n"
                "ch0 = P0\n"
                "[server]\n"
                f"url = {cfg.server_url}\n"
                f"token = {cfg.testbed_token}\n"
                "heartbeat_interval_s = 0.3\n"
                "[exec]\n"
                f"service_delay_s = {cfg.delay_s}\n"
                "[http]\n"
                "host = 127.0.0.1\n"
                f"port = {port}\n"
            )
            config = CoordinatorConfig.load(ini, Path(self._tmp.name) / f"art{i}")
            self._servers.append(ThreadedServer(create_app(config), port=port).start())

    def stop(self) -> None:
        for server in self._servers:
            server.stop()
        self._tmp.cleanup()


def _wait_online_count(client: _Client, want: int, timeout_s: float = 60.0) -> None:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if len(client.online_testbeds()) == want:
            return
        time.sleep(0.1)
    raise BenchAborted(f"fleet never reached {want} online testbeds within {timeout_s}s")


def run_load(cfg: BenchConfig) -> BenchResult:
    client = _Client(cfg)
    health = client.http.get(f"{client.base}/health")
    if health.status_code != 200:
        raise BenchAborted(f"server not healthy: HTTP {health.status_code}")
    runs: list[RunMetrics] = []
    for t in cfg.testbed_counts:
        fleet = None
        if cfg.spawn:
            fleet = _SpawnedFleet(cfg, t)
        try:
            _wait_online_count(client, t)
            _verify_fleet(client, t, cfg.delay_s, cfg.dut_profile)
            for n in cfg.n_values:
                reps = [_run_cell(client, n, t, cfg) for _ in range(cfg.reps)]
                pooled = tuple(x for r in reps for x in r.latencies_s)
                runs.append(
                    RunMetrics(
                        n=n,
                        testbeds=t,
                        latencies_s=pooled,
                        throughput_jobs_per_s=statistics.fmean(
                            r.throughput_jobs_per_s for r in reps
                        ),
                    )
                )
        finally:
            if fleet is not None:
                fleet.stop()
                _wait_online_count(client, 0)
    fits = tuple(f for t in cfg.testbed_counts if (f := _fit(runs, t)) is not None)
    return BenchResult(runs=tuple(runs), fits=fits)


def emit_report(result: BenchResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(result.runs, key=lambda r: (r.testbeds, r.n))
    with open(out_dir / "latency.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "testbeds", "mean_s", "median_s", "p95_s"])
        for r in ordered:
            w.writerow([r.n, r.testbeds, f"{r.mean_s:.6f}", f"{r.median_s:.6f}", f"{r.p95_s:.6f}"])
    with open(out_dir / "throughput.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "testbeds", "jobs_per_s"])
        for r in ordered:
            w.writerow([r.n, r.testbeds, f"{r.throughput_jobs_per_s:.6f}"])


def format_summary(result: BenchResult) -> str:
    lines = ["  n  testbeds   mean_s   median_s   p95_s   jobs_per_s"]
    for r in sorted(result.runs, key=lambda r: (r.testbeds, r.n)):
        lines.append(
            f"{r.n:>4} {r.testbeds:>8}   {r.mean_s:>7.3f}  {r.median_s:>8.3f}  "
            f"{r.p95_s:>6.3f}   {r.throughput_jobs_per_s:>9.3f}"
        )
    for fit in result.fits:
        lines.append(
            f"T={fit.testbeds}: latency ~= {fit.slope_s_per_job:.5f}*N + "
            f"{fit.intercept_s:.3f}  (R^2 = {fit.r_squared:.4f})"
        )
    ts = sorted({r.testbeds for r in result.runs})
    ns = sorted({r.n for r in result.runs})
    if len(ts) >= 2 and ns:
        n_max = ns[-1]
        try:
            base = result.run_for(n_max, ts[0]).throughput_jobs_per_s
            top = result.run_for(n_max, ts[-1]).throughput_jobs_per_s
            lines.append(
                f"throughput ratio T={ts[-1]}/T={ts[0]} at N={n_max}: {top / base:.2f}"
            )
        except KeyError:
            pass
    return "\n".join(lines)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Latency/throughput scaling bench")
    parser.add_argument("--server", required=True, help="grading server base URL")
    parser.add_argument("--n", default="10,50,100,200", help="comma list of submission counts")
    parser.add_argument("--testbeds", default="1", help="comma list of testbed counts")
    parser.add_argument("--delay", type=float, default=0.3, help="per-job service delay (s)")
    parser.add_argument("--reps", type=int, default=1)
    parser.add_argument("--out", default="bench-out", help="output directory for CSVs")
    parser.add_argument("--spawn", action="store_true", help="spawn coordinators in-process")
    parser.add_argument("--testbed-token", default="", help="heartbeat token for --spawn")
    parser.add_argument("--timeout", type=float, default=600.0, help="per-cell timeout (s)")
    args = parser.parse_args(argv)
    cfg = BenchConfig(
        server_url=args.server,
        n_values=_int_list(args.n),
        testbed_counts=_int_list(args.testbeds),
        delay_s=args.delay,
        reps=args.reps,
        out_dir=Path(args.out),
        spawn=args.spawn,
        testbed_token=args.testbed_token,
        run_timeout_s=args.timeout,
    )
    try:
        result = run_load(cfg)
    except BenchAborted as e:
        print(f"bench aborted: {e}", file=sys.stderr)
        return 2
    emit_report(result, cfg.out_dir)
    print(format_summary(result))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
