"""Primary grading server: REST API, RBAC, registry, and worker lifecycle.

Role model: roles are per course. The user who creates a course is its
instructor; instructors manage the roster, assignments, test cases, and see
everything. Students submit and see their own results through the
visibility filter. Listing testbeds requires any authenticated account.

Error bodies are always {"error": code, "detail": text}; timestamps are
RFC 3339 UTC.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path

import uvicorn
from fastapi import FastAPI, Request, Response
from fastapi.responses import FileResponse, JSONResponse

from . import model, visibility
from .dut import PROFILES
from .grading import ARTIFACT_FILES, BUILTIN_PWM, GRADER_FAULT_FEEDBACK
from .model import (
    Assignment,
    CaptureConfig,
    ModelError,
    Role,
    Session,
    Submission,
    SubmissionState,
    TestCase,
    User,
    Visibility,
)
from .scheduler import LeaseReaper, SchedulerConfig, WorkerManager
from .store import DuplicateKey, Store, parse_rfc3339, rfc3339

log = logging.getLogger("labgrade.server")


@dataclass
class ServerConfig:
    db_path: str
    artifact_root: Path
    testbed_token: str
    heartbeat_interval_s: float = 10.0
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    reap_interval_s: float = 1.0
    registry_sync_interval_s: float = 1.0

    @property
    def offline_after_s(self) -> float:
        return 3.0 * self.heartbeat_interval_s


def _err(status: int, code: str, detail: str) -> JSONResponse:
    return JSONResponse({"error": code, "detail": detail}, status_code=status)


class _ApiError(Exception):
    def __init__(self, status: int, code: str, detail: str):
        super().__init__(detail)
        self.status = status
        self.code = code
        self.detail = detail


def create_app(config: ServerConfig, now_fn=None) -> FastAPI:
    import time as _time

    store = Store(config.db_path, now_fn=now_fn or _time.time)
    manager = WorkerManager(
        store, config.artifact_root, config.scheduler, config.testbed_token
    )
    reaper = LeaseReaper(store, config.reap_interval_s)
    stop_event = threading.Event()
    config.artifact_root.mkdir(parents=True, exist_ok=True)

    @contextlib.asynccontextmanager
    async def _lifespan(_app: FastAPI):
        reaper.start()
        registry_thread.start()
        yield
        stop_event.set()
        reaper.stop()
        manager.stop_all()

    app = FastAPI(title="labgrade server", lifespan=_lifespan)
    app.state.store = store
    app.state.manager = manager
    app.state.config = config

    def _sync_workers() -> None:
        online = {
            t["testbed_id"]: (t["base_url"], t["descriptor"].get("dut_profile", ""))
            for t in store.testbeds(config.offline_after_s)
            if t["online"] and t["base_url"]
        }
        manager.sync(online)

    def _registry_loop() -> None:
        while not stop_event.is_set():
            try:
                _sync_workers()
            except Exception:  # noqa: BLE001
                log.exception("registry sync failed")
            stop_event.wait(config.registry_sync_interval_s)

    registry_thread = threading.Thread(target=_registry_loop, name="registry-sync", daemon=True)

    @app.exception_handler(_ApiError)
    async def _api_error_handler(_request: Request, exc: _ApiError) -> JSONResponse:
        return _err(exc.status, exc.code, exc.detail)

    # --- auth helpers ----------------------------------------------------

    def _caller(request: Request) -> User:
        header = request.headers.get("Authorization", "")
        if header.startswith("Bearer "):
            user = store.user_for_token(header[len("Bearer "):])
            if user is not None:
                return user
        raise _ApiError(401, "unauthorized", "missing or invalid token")

    def _require_role(user: User, course_id: str, role: Role) -> None:
        if store.role_of(user.id, course_id) is not role:
            raise _ApiError(403, "forbidden", f"requires {role.value} role in course {course_id}")

    def _assignment_or_404(assignment_id: str) -> Assignment:
        a = store.get_assignment(assignment_id)
        if a is None:
            raise _ApiError(404, "not_found", f"no assignment {assignment_id}")
        return a

    async def _json_body(request: Request) -> dict:
        try:
            body = await request.json()
        except ValueError:
            raise _ApiError(400, "invalid", "body is not JSON") from None
        if not isinstance(body, dict):
            raise _ApiError(400, "invalid", "body must be a JSON object")
        return body

    # --- health and auth ---------------------------------------------------

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/auth/register", status_code=201)
    async def register(request: Request) -> dict:
        body = await _json_body(request)
        username = body.get("username", "")
        password = body.get("password", "")
        if not username or not isinstance(username, str):
            raise _ApiError(400, "invalid", "username required")
        if not password or not isinstance(password, str):
            raise _ApiError(400, "invalid", "password required")
        try:
            user = store.create_user(username, body.get("display_name", username), password)
        except DuplicateKey:
            raise _ApiError(409, "username_taken", f"username {username!r} taken") from None
        return {"user_id": user.id}

    @app.post("/auth/login")
    async def login(request: Request) -> dict:
        body = await _json_body(request)
        user = store.verify_password(body.get("username", ""), body.get("password", ""))
        if user is None:
            raise _ApiError(401, "invalid_credentials", "bad username or password")
        return {"token": store.issue_token(user.id), "user_id": user.id}

    # --- courses and roster -------------------------------------------------

    @app.post("/courses", status_code=201)
    async def create_course(request: Request) -> dict:
        user = _caller(request)
        body = await _json_body(request)
        title = body.get("title", "")
        if not title:
            raise _ApiError(400, "invalid", "title required")
        course_id = body.get("id") or ("c-" + secrets.token_hex(4))
        try:
            store.create_course(course_id, title)
        except DuplicateKey:
            raise _ApiError(409, "duplicate", f"course {course_id!r} exists") from None
        store.set_role(user.id, course_id, Role.INSTRUCTOR)
        return {"course_id": course_id}

    @app.post("/courses/{course_id}/roster")
    async def set_roster(course_id: str, request: Request) -> dict:
        user = _caller(request)
        if store.get_course(course_id) is None:
            raise _ApiError(404, "not_found", f"no course {course_id}")
        _require_role(user, course_id, Role.INSTRUCTOR)
        body = await _json_body(request)
        target = store.get_user(body.get("user_id", ""))
        if target is None:
            raise _ApiError(404, "not_found", "no such user")
        try:
            role = Role(body.get("role", ""))
        except ValueError:
            raise _ApiError(400, "invalid", "role must be instructor or student") from None
        store.set_role(target.id, course_id, role)
        return {"user_id": target.id, "role": role.value}

    # --- assignments and test cases -----------------------------------------

    @app.post("/courses/{course_id}/assignments", status_code=201)
    async def create_assignment(course_id: str, request: Request) -> dict:
        user = _caller(request)
        if store.get_course(course_id) is None:
            raise _ApiError(404, "not_found", f"no course {course_id}")
        _require_role(user, course_id, Role.INSTRUCTOR)
        body = await _json_body(request)
        profile = body.get("dut_profile", "")
        if profile not in PROFILES:
            raise _ApiError(400, "invalid", f"unknown dut_profile {profile!r}")
        deadline = body.get("deadline", "")
        try:
            parse_rfc3339(deadline)
        except (ValueError, TypeError):
            raise _ApiError(400, "invalid", "deadline must be RFC 3339") from None
        assignment = Assignment(
            id=body.get("id") or ("a-" + secrets.token_hex(4)),
            course_id=course_id,
            statement=body.get("statement", ""),
            dut_profile=profile,
            deadline=deadline,
        )
        try:
            store.create_assignment(assignment)
        except DuplicateKey:
            raise _ApiError(409, "duplicate", f"assignment {assignment.id!r} exists") from None
        return {"assignment_id": assignment.id}

    @app.patch("/assignments/{assignment_id}")
    async def extend_deadline(assignment_id: str, request: Request) -> dict:
        user = _caller(request)
        assignment = _assignment_or_404(assignment_id)
        _require_role(user, assignment.course_id, Role.INSTRUCTOR)
        body = await _json_body(request)
        deadline = body.get("deadline", "")
        try:
            parse_rfc3339(deadline)
        except (ValueError, TypeError):
            raise _ApiError(400, "invalid", "deadline must be RFC 3339") from None
        store.update_deadline(assignment_id, deadline)
        return {"assignment_id": assignment_id, "deadline": deadline}

    @app.post("/assignments/{assignment_id}/testcases", status_code=201)
    async def add_test_case(assignment_id: str, request: Request) -> dict:
        user = _caller(request)
        assignment = _assignment_or_404(assignment_id)
        _require_role(user, assignment.course_id, Role.INSTRUCTOR)
        body = await _json_body(request)
        try:
            visibility_tier = Visibility(body.get("visibility", "public"))
            cap = body.get("capture", {})
            tc = TestCase(
                id=body.get("id") or ("tc-" + secrets.token_hex(4)),
                assignment_id=assignment_id,
                visibility=visibility_tier,
                weight=float(body.get("weight", 1.0)),
                grading_script=body.get("grading_script", BUILTIN_PWM),
                capture=CaptureConfig(
                    rate_hz=int(cap.get("rate_hz", 5000)),
                    duration_us=int(cap.get("duration_us", 100_000)),
                    pin=str(cap.get("pin", "P0")),
                ),
                sessions=tuple(
                    Session(
                        start_us=int(s["start_us"]),
                        period_us=int(s["period_us"]),
                        duty=float(s["duty"]),
                    )
                    for s in body.get("sessions", [])
                ),
            )
        except (ModelError, KeyError, TypeError, ValueError) as e:
            raise _ApiError(400, "invalid", str(e)) from None
        try:
            store.add_test_case(tc)
        except DuplicateKey:
            raise _ApiError(409, "duplicate", f"test case {tc.id!r} exists") from None
        return {"test_case_id": tc.id}

    # --- submissions -----------------------------------------------------------

    @app.post("/assignments/{assignment_id}/submissions", status_code=202)
    async def submit(assignment_id: str, request: Request) -> dict:
        user = _caller(request)
        assignment = _assignment_or_404(assignment_id)
        _require_role(user, assignment.course_id, Role.STUDENT)
        if store.now() >= parse_rfc3339(assignment.deadline):
            raise _ApiError(403, "deadline_passed", "the deadline has passed")
        body = await _json_body(request)
        source = body.get("source")
        if not isinstance(source, str):
            raise _ApiError(400, "invalid", "source required")
        if len(source.encode()) > model.MAX_SOURCE_BYTES:
            raise _ApiError(413, "payload_too_large", "source exceeds 64 KiB")
        sub = Submission(
            id="s-" + secrets.token_hex(8),
            assignment_id=assignment_id,
            student_id=user.id,
            source=source,
            submitted_at=rfc3339(store.now()),
        )
        store.add_submission(sub)
        return {"submission_id": sub.id, "state": sub.state.value, "submitted_at": sub.submitted_at}

    def _submission_access(sub: Submission, user: User) -> tuple[Role, Assignment]:
        assignment = _assignment_or_404(sub.assignment_id)
        if store.role_of(user.id, assignment.course_id) is Role.INSTRUCTOR:
            return Role.INSTRUCTOR, assignment
        if sub.student_id == user.id:
            return Role.STUDENT, assignment
        raise _ApiError(403, "forbidden", "not your submission")

    @app.get("/submissions/{submission_id}")
    def get_submission(submission_id: str, request: Request) -> dict:
        user = _caller(request)
        sub = store.get_submission(submission_id)
        if sub is None:
            raise _ApiError(404, "not_found", f"no submission {submission_id}")
        role, assignment = _submission_access(sub, user)
        past_deadline = store.now() >= parse_rfc3339(assignment.deadline)
        view: dict = {
            "submission_id": sub.id,
            "assignment_id": sub.assignment_id,
            "state": sub.state.value,
            "submitted_at": sub.submitted_at,
            "graded_at": sub.graded_at,
            "report": None,
        }
        if sub.state is SubmissionState.FAILED:
            view["failure_reason"] = (
                sub.failure_reason if role is Role.INSTRUCTOR else GRADER_FAULT_FEEDBACK
            )
        if sub.report is not None:
            test_cases = store.test_cases_for(sub.assignment_id)
            view["report"] = visibility.visible_view(
                sub.report,
                role,
                {tc.id: tc.visibility for tc in test_cases},
                {tc.id: tc.weight for tc in test_cases},
                past_deadline,
            )
        return view

    @app.get("/submissions/{submission_id}/artifacts/{test_case_id}/{file_name}")
    def get_artifact(
        submission_id: str, test_case_id: str, file_name: str, request: Request
    ) -> Response:
        user = _caller(request)
        sub = store.get_submission(submission_id)
        if sub is None:
            raise _ApiError(404, "not_found", f"no submission {submission_id}")
        role, assignment = _submission_access(sub, user)
        if file_name not in ARTIFACT_FILES:
            raise _ApiError(404, "not_found", f"no artifact file {file_name}")
        if sub.state is not SubmissionState.GRADED:
            raise _ApiError(409, "not_graded_yet", f"submission is {sub.state.value}")
        test_cases = {tc.id: tc for tc in store.test_cases_for(sub.assignment_id)}
        past_deadline = store.now() >= parse_rfc3339(assignment.deadline)
        tc = test_cases.get(test_case_id)
        # Unknown and invisible test cases are indistinguishable on purpose.
        if tc is None or not visibility.artifact_visible(role, tc.visibility, past_deadline):
            raise _ApiError(404, "not_found", "no such artifact")
        path = config.artifact_root / submission_id / test_case_id / file_name
        if not path.is_file():
            raise _ApiError(404, "not_found", "artifact file missing")
        media = "text/plain" if file_name != "print.log" else "application/octet-stream"
        return FileResponse(path, media_type=media)

    @app.get("/assignments/{assignment_id}/overview")
    def overview(assignment_id: str, request: Request, include_hidden: bool = False) -> dict:
        user = _caller(request)
        assignment = _assignment_or_404(assignment_id)
        _require_role(user, assignment.course_id, Role.INSTRUCTOR)
        past_deadline = store.now() >= parse_rfc3339(assignment.deadline)
        test_cases = store.test_cases_for(assignment_id)
        vis_map = {tc.id: tc.visibility for tc in test_cases}
        weights = {tc.id: tc.weight for tc in test_cases}
        by_student: dict[str, list[dict]] = {}
        for sub in store.submissions_for_assignment(assignment_id):
            point: dict = {
                "submission_id": sub.id,
                "submitted_at": sub.submitted_at,
                "state": sub.state.value,
                "score": None,
            }
            if sub.report is not None:
                point["score"] = visibility.visible_total(
                    sub.report, vis_map, weights, past_deadline, include_hidden
                )
            by_student.setdefault(sub.student_id, []).append(point)
        students = [
            {"student_id": sid, "points": points} for sid, points in sorted(by_student.items())
        ]
        return {
            "assignment_id": assignment_id,
            "include_hidden": include_hidden,
            "students": students,
        }

    # --- testbeds ---------------------------------------------------------------

    @app.post("/testbeds/heartbeat")
    async def heartbeat(request: Request) -> dict:
        if request.headers.get("Authorization") != f"Bearer {config.testbed_token}":
            raise _ApiError(401, "unauthorized", "bad testbed token")
        body = await _json_body(request)
        testbed_id = body.get("testbed_id")
        base_url = body.get("base_url", "")
        if not testbed_id:
            raise _ApiError(400, "invalid", "testbed_id required")
        store.upsert_testbed(str(testbed_id), body, str(base_url))
        _sync_workers()
        return {"ok": True}

    @app.get("/testbeds")
    def list_testbeds(request: Request) -> dict:
        _caller(request)
        return {"testbeds": store.testbeds(config.offline_after_s)}

    return app


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Run the grading server")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--db", default="labgrade.sqlite3")
    parser.add_argument("--artifact-dir", default="artifacts")
    parser.add_argument("--testbed-token", required=True)
    parser.add_argument("--heartbeat-interval", type=float, default=10.0)
    parser.add_argument("--poll-min", type=float, default=0.5)
    parser.add_argument("--poll-max", type=float, default=1.5)
    parser.add_argument("--lease", type=float, default=120.0)
    parser.add_argument("--retries", type=int, default=2)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    config = ServerConfig(
        db_path=args.db,
        artifact_root=Path(args.artifact_dir),
        testbed_token=args.testbed_token,
        heartbeat_interval_s=args.heartbeat_interval,
        scheduler=SchedulerConfig(
            poll_min_s=args.poll_min,
            poll_max_s=args.poll_max,
            lease_s=args.lease,
            max_attempts=args.retries + 1,
        ),
    )
    uvicorn.run(create_app(config), host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
