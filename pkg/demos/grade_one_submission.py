"""End-to-end walkthrough: server, one testbed, one graded submission.

Spins the grading server and a coordinator on background threads, provisions
a course through the REST API exactly like a client would, submits the
reference hardware-PWM program and a buggy one, and prints both reports.
Everything runs in this process; no state survives the script.
"""
from __future__ import annotations

import tempfile
import time
from pathlib import Path

import httpx

from labgrade import firmware
from labgrade.coordinator import CoordinatorConfig, create_app as coordinator_app
from labgrade.scheduler import SchedulerConfig
from labgrade.server import ServerConfig, create_app as server_app
from labgrade.webhost import ThreadedServer, free_port

TESTBED_TOKEN = "demo-secret"


def start_server(tmp: Path) -> ThreadedServer:
    config = ServerConfig(
        db_path=str(tmp / "demo.sqlite3"),
        artifact_root=tmp / "artifacts",
        testbed_token=TESTBED_TOKEN,
        heartbeat_interval_s=0.5,
        scheduler=SchedulerConfig(poll_min_s=0.05, poll_max_s=0.15, lease_s=30.0),
        registry_sync_interval_s=0.1,
    )
    return ThreadedServer(server_app(config)).start()


def start_testbed(tmp: Path, server_url: str) -> ThreadedServer:
    port = free_port()
    ini = tmp / "testbed.ini"
    ini.write_text(
        "[testbed]\n"
        "id = demo-bench-1\n"
        "dut_profile = dut-v1\n"
        "max_sample_rate_hz = 1000000\n"
        "[wiring]\n"
        "ch0 = P0\n"
        "[server]\n"
        f"url = {server_url}\n"
        f"token = {TESTBED_TOKEN}\n"
        "heartbeat_interval_s = 0.3\n"
        "[exec]\n"
        "service_delay_s = 0\n"
        "[http]\n"
        "host = 127.0.0.1\n"
        f"port = {port}\n"
    )
    config = CoordinatorConfig.load(ini, artifact_root=tmp / "testbed-artifacts")
    return ThreadedServer(coordinator_app(config), port=port).start()


def main() -> None:
    tmp = Path(tempfile.mkdtemp(prefix="labgrade-demo-"))
    server = start_server(tmp)
    testbed = start_testbed(tmp, server.url)
    http = httpx.Client(base_url=server.url, timeout=30.0)

    def post(path: str, body: dict, token: str | None = None) -> dict:
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        r = http.post(path, json=body, headers=headers)
        r.raise_for_status()
        return r.json()

    # accounts and course
    post("/auth/register", {"username": "prof", "password": "pw"})
    instructor = post("/auth/login", {"username": "prof", "password": "pw"})["token"]
    student_id = post("/auth/register", {"username": "sam", "password": "pw"})["user_id"]
    student = post("/auth/login", {"username": "sam", "password": "pw"})["token"]
    course = post("/courses", {"title": "embedded systems"}, instructor)["course_id"]
    post(f"/courses/{course}/roster", {"user_id": student_id, "role": "student"}, instructor)

    assignment = post(
        f"/courses/{course}/assignments",
        {
            "statement": "drive a 1 kHz, 25% duty PWM wave on P0",
            "dut_profile": "dut-v1",
            "deadline": "2099-01-01T00:00:00+00:00",
        },
        instructor,
    )["assignment_id"]
    post(
        f"/assignments/{assignment}/testcases",
        {
            "visibility": "public",
            "grading_script": "builtin:pwm",
            "capture": {"rate_hz": 1_000_000, "duration_us": 8000, "pin": "P0"},
            "sessions": [{"start_us": 0, "period_us": 1000, "duty": 0.25}],
        },
        instructor,
    )

    # wait for the testbed heartbeat to register
    while not any(
        t["online"]
        for t in http.get(
            "/testbeds", headers={"Authorization": f"Bearer {student}"}
        ).json()["testbeds"]
    ):
        time.sleep(0.1)
    print(f"testbed online at {testbed.url}")

    for label, source in [("correct", firmware.HARDWARE_PWM), ("buggy", firmware.BUGGY_WRONG_PIN)]:
        sid = post(f"/assignments/{assignment}/submissions", {"source": source}, student)[
            "submission_id"
        ]
        while True:
            view = http.get(
                f"/submissions/{sid}", headers={"Authorization": f"Bearer {student}"}
            ).json()
            if view["state"] in ("graded", "failed"):
                break
            time.sleep(0.1)
        report = view["report"]
        print(f"\n{label} submission {sid}: state={view['state']} total={report['total']:.1f}")
        for entry in report["results"]:
            print(f"  {entry['test_case_id']}: {entry['score']:.1f}  {entry['feedback']}")

    http.close()
    testbed.stop()
    server.stop()


if __name__ == "__main__":
    main()
