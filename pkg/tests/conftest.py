"""Shared fixtures: fake clock, live server stacks, coordinator subprocesses."""
from __future__ import annotations

import subprocess
import sys
import time
from pathlib import Path

import httpx
import pytest

from labgrade import engine, model
from labgrade.dut import assemble, get_profile
from labgrade.scheduler import SchedulerConfig
from labgrade.server import ServerConfig, create_app
from labgrade.webhost import ThreadedServer, free_port

TESTBED_TOKEN = "testbed-shared-secret"


class FakeClock:
    """Injectable clock; tests advance it explicitly."""

    def __init__(self, start: float = 1_700_000_000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


def fast_scheduler() -> SchedulerConfig:
    return SchedulerConfig(
        poll_min_s=0.02,
        poll_max_s=0.06,
        lease_s=30.0,
        status_poll_s=0.01,
        grading_timeout_s=30.0,
    )


class Api:
    """Thin typed-ish client for the server REST API."""

    def __init__(self, base_url: str):
        self.base = base_url.rstrip("/")
        self.http = httpx.Client(timeout=30.0)

    def close(self) -> None:
        self.http.close()

    @staticmethod
    def _hdr(token: str | None) -> dict[str, str]:
        return {"Authorization": f"Bearer {token}"} if token else {}

    def post(self, path: str, body: dict, token: str | None = None) -> httpx.Response:
        return self.http.post(self.base + path, json=body, headers=self._hdr(token))

    def get(self, path: str, token: str | None = None) -> httpx.Response:
        return self.http.get(self.base + path, headers=self._hdr(token))

    def register(self, username: str, password: str = "pw") -> str:
        r = self.post("/auth/register", {"username": username, "password": password})
        assert r.status_code == 201, r.text
        return r.json()["user_id"]

    def login(self, username: str, password: str = "pw") -> str:
        r = self.post("/auth/login", {"username": username, "password": password})
        assert r.status_code == 200, r.text
        return r.json()["token"]

    def new_user(self, username: str) -> tuple[str, str]:
        return self.register(username), self.login(username)

    def create_course(self, token: str, title: str = "embedded systems") -> str:
        r = self.post("/courses", {"title": title}, token)
        assert r.status_code == 201, r.text
        return r.json()["course_id"]

    def enroll(self, token: str, course_id: str, user_id: str, role: str = "student") -> None:
        r = self.post(f"/courses/{course_id}/roster", {"user_id": user_id, "role": role}, token)
        assert r.status_code == 200, r.text

    def create_assignment(
        self,
        token: str,
        course_id: str,
        deadline: str = "2099-01-01T00:00:00+00:00",
        dut_profile: str = "dut-v1",
    ) -> str:
        r = self.post(
            f"/courses/{course_id}/assignments",
            {"statement": "produce PWM", "dut_profile": dut_profile, "deadline": deadline},
            token,
        )
        assert r.status_code == 201, r.text
        return r.json()["assignment_id"]

    def add_test_case(self, token: str, assignment_id: str, **overrides) -> str:
        body = {
            "visibility": "public",
            "weight": 1.0,
            "grading_script": "builtin:pwm",
            "capture": {"rate_hz": 1_000_000, "duration_us": 8000, "pin": "P0"},
            "sessions": [{"start_us": 0, "period_us": 1000, "duty": 0.25}],
        }
        body.update(overrides)
        r = self.post(f"/assignments/{assignment_id}/testcases", body, token)
        assert r.status_code == 201, r.text
        return r.json()["test_case_id"]

    def submit(self, token: str, assignment_id: str, source: str) -> str:
        r = self.post(f"/assignments/{assignment_id}/submissions", {"source": source}, token)
        assert r.status_code == 202, r.text
        return r.json()["submission_id"]

    def wait_graded(self, token: str, submission_id: str, timeout_s: float = 60.0) -> dict:
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            r = self.get(f"/submissions/{submission_id}", token)
            assert r.status_code == 200, r.text
            view = r.json()
            if view["state"] in ("graded", "failed"):
                return view
            time.sleep(0.05)
        raise TimeoutError(f"submission {submission_id} never reached a terminal state")

    def wait_online_testbeds(self, token: str, want: int, timeout_s: float = 30.0) -> list[dict]:
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            r = self.get("/testbeds", token)
            assert r.status_code == 200, r.text
            online = [t for t in r.json()["testbeds"] if t["online"]]
            if len(online) == want:
                return online
            time.sleep(0.05)
        raise TimeoutError(f"never saw {want} online testbeds")


def api_over(client) -> Api:
    """Wrap an in-process TestClient (or any httpx-compatible client) as Api."""
    api = Api.__new__(Api)
    api.base = ""
    api.http = client
    return api


class ServerStack:
    """A live grading server on a real port plus its API client."""

    def __init__(self, tmp: Path, heartbeat_interval_s: float = 0.4, **scheduler_overrides):
        base = fast_scheduler()
        if scheduler_overrides:
            base = SchedulerConfig(
                **{**base.__dict__, **scheduler_overrides}
            )
        self.config = ServerConfig(
            db_path=str(tmp / "server.sqlite3"),
            artifact_root=tmp / "artifacts",
            testbed_token=TESTBED_TOKEN,
            heartbeat_interval_s=heartbeat_interval_s,
            scheduler=base,
            reap_interval_s=0.2,
            registry_sync_interval_s=0.1,
        )
        self.app = create_app(self.config)
        self.server = ThreadedServer(self.app).start()
        self.url = self.server.url
        self.api = Api(self.url)
        self.store = self.app.state.store

    def stop(self) -> None:
        self.api.close()
        self.server.stop()


def coordinator_ini(
    tmp: Path,
    testbed_id: str,
    server_url: str,
    port: int,
    service_delay_s: float = 0.0,
    dut_profile: str = "dut-v1",
    heartbeat_interval_s: float = 0.2,
    pins: tuple[str, ...] = ("P0",),
) -> Path:
    path = tmp / f"{testbed_id}.ini"
    wiring = "".join(f"ch{i} = {pin}\n" for i, pin in enumerate(pins))
    path.write_text(
        "[testbed]\n"
        f"id = {testbed_id}\n"
        f"dut_profile = {dut_profile}\n"
        "max_sample_rate_hz = 1000000\n"
        "[wiring]\n"
        f"{wiring}"
        "[server]\n"
        f"url = {server_url}\n"
        f"token = {TESTBED_TOKEN}\n"
        f"heartbeat_interval_s = {heartbeat_interval_s}\n"
        "[exec]\n"
        f"service_delay_s = {service_delay_s}\n"
        "[http]\n"
        "host = 127.0.0.1\n"
        f"port = {port}\n"
    )
    return path


class CoordinatorProc:
    """A coordinator in its own process, killable mid-job."""

    def __init__(self, ini_path: Path, port: int):
        self.ini_path = ini_path
        self.port = port
        self.url = f"http://127.0.0.1:{port}"
        self.proc: subprocess.Popen | None = None

    def start(self, timeout_s: float = 20.0) -> "CoordinatorProc":
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "labgrade.coordinator", "--config", str(self.ini_path)],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
        )
        deadline = time.monotonic() + timeout_s
        with httpx.Client(timeout=2.0) as probe:
            while time.monotonic() < deadline:
                if self.proc.poll() is not None:
                    raise RuntimeError("coordinator process exited during startup")
                try:
                    if probe.get(self.url + "/health").status_code == 200:
                        return self
                except httpx.HTTPError:
                    pass
                time.sleep(0.05)
        raise TimeoutError("coordinator never became healthy")

    def kill(self) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait(timeout=10)

    def stop(self) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait(timeout=10)


def spawn_coordinator(
    tmp: Path, testbed_id: str, server_url: str, service_delay_s: float = 0.0, **kw
) -> CoordinatorProc:
    port = free_port()
    ini = coordinator_ini(tmp, testbed_id, server_url, port, service_delay_s, **kw)
    return CoordinatorProc(ini, port).start()


@pytest.fixture
def clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def stack(tmp_path):
    s = ServerStack(tmp_path)
    yield s
    s.stop()


def write_artifacts(
    target: Path,
    source: str,
    sessions: tuple[model.Session, ...],
    cap_cfg: model.CaptureConfig,
    profile_id: str = "dut-v1",
) -> Path:
    """Produce the three artifact files a coordinator would, for offline tests."""
    profile = get_profile(profile_id)
    capture, print_log = engine.capture(assemble(source), sessions, cap_cfg, profile)
    target.mkdir(parents=True, exist_ok=True)
    (target / "capture.rle").write_text(engine.write_capture(capture))
    (target / "schedule.csv").write_text(engine.write_schedule(sessions))
    (target / "print.log").write_bytes(print_log)
    return target
