"""Testbed coordinator: one simulated testbed behind a small HTTP service.

Presents a single DUT plus capture engine as a unit: advertises itself to
the grading server with periodic heartbeats, accepts one grading job at a
time, executes the capture flow per test case (reset, blank firmware,
assemble, run, capture), and serves the artifacts as a zip until the server
deletes them.

The capture flow runs the blank program first and checks the all-low state,
so a submission that fails to assemble produces exactly the artifacts a
blank DUT would: no stale wave from the previous job can ever leak into the
next report. Artifact zips are built with fixed file timestamps, which makes
equal artifacts equal bytes.

Config is an INI file (see ``CoordinatorConfig.load``); its canonical bytes
hash into the descriptor's config_hash.
"""
from __future__ import annotations

import argparse
import configparser
import contextlib
import hashlib
import io
import json
import logging
import shutil
import tempfile
import threading
import time
import uuid
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import uvicorn
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import engine
from .dut import BLANK_PROGRAM, CompileError, EngineFault, assemble, get_profile, run_program
from .model import CaptureConfig, ModelError, Session

log = logging.getLogger("labgrade.coordinator")

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class CoordinatorConfig:
    testbed_id: str
    dut_profile: str
    max_sample_rate_hz: int
    wiring: dict[str, str]  # engine channel -> DUT pin
    server_url: str  # empty string disables heartbeats
    server_token: str
    heartbeat_interval_s: float
    service_delay_s: float
    artifact_ttl_s: float
    host: str
    port: int
    advertise_url: str
    config_hash: str
    artifact_root: Path

    def __post_init__(self) -> None:
        profile = get_profile(self.dut_profile)
        for channel, pin in self.wiring.items():
            if pin not in profile.pins:
                raise ModelError(
                    f"wiring {channel}={pin} names a pin outside profile {self.dut_profile}"
                )

    @property
    def observed_pins(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.wiring.values())))

    def descriptor(self, status: str) -> dict:
        profile = get_profile(self.dut_profile)
        return {
            "testbed_id": self.testbed_id,
            "dut_profile": self.dut_profile,
            "capabilities": {
                "max_sample_rate_hz": self.max_sample_rate_hz,
                "pins": list(profile.pins),
            },
            "wiring": dict(self.wiring),
            "status": status,
            "config_hash": self.config_hash,
            "base_url": self.advertise_url,
            "service_delay_s": self.service_delay_s,
        }

    @staticmethod
    def load(path: str | Path, artifact_root: str | Path | None = None) -> CoordinatorConfig:
        raw = Path(path).read_bytes()
        parser = configparser.ConfigParser()
        parser.read_string(raw.decode())
        tb = parser["testbed"]
        server = parser["server"] if parser.has_section("server") else {}
        ex = parser["exec"] if parser.has_section("exec") else {}
        http_sec = parser["http"] if parser.has_section("http") else {}
        host = http_sec.get("host", "127.0.0.1")
        port = int(http_sec.get("port", "9000"))
        return CoordinatorConfig(
            testbed_id=tb["id"],
            dut_profile=tb["dut_profile"],
            max_sample_rate_hz=int(tb.get("max_sample_rate_hz", "1000000")),
            wiring=dict(parser["wiring"]) if parser.has_section("wiring") else {},
            server_url=server.get("url", "").rstrip("/"),
            server_token=server.get("token", ""),
            heartbeat_interval_s=float(server.get("heartbeat_interval_s", "10")),
            service_delay_s=float(ex.get("service_delay_s", "0")),
            artifact_ttl_s=float(ex.get("artifact_ttl_s", "86400")),
            host=host,
            port=port,
            advertise_url=http_sec.get("advertise_url", f"http://{host}:{port}"),
            config_hash=hashlib.sha256(raw).hexdigest(),
            artifact_root=Path(artifact_root) if artifact_root else Path(tempfile.mkdtemp(prefix="labgrade-tb-")),
        )


@dataclass
class _JobRecord:
    job_id: str
    submission_id: str
    status: str  # running | done | failed
    created_at: float
    directory: Path
    compile_ok: bool | None = None
    compile_message: str = ""
    error: str = ""
    test_case_ids: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class _JobTestCase:
    id: str
    capture: CaptureConfig
    sessions: tuple[Session, ...]


class Coordinator:
    """State shared between the HTTP handlers, heartbeats, and the executor."""

    def __init__(self, config: CoordinatorConfig):
        self.config = config
        self._lock = threading.Lock()
        self._jobs: dict[str, _JobRecord] = {}
        self._active: str | None = None
        self._fault = False
        self._stop = threading.Event()
        self._heartbeat_thread: threading.Thread | None = None
        self.config.artifact_root.mkdir(parents=True, exist_ok=True)

    # --- status -----------------------------------------------------------

    def status(self) -> str:
        with self._lock:
            if self._fault:
                return "fault"
            return "busy" if self._active else "idle"

    # --- heartbeats ---------------------------------------------------------

    def start_heartbeats(self) -> None:
        if not self.config.server_url:
            return
        self._heartbeat_thread = threading.Thread(
            target=self._heartbeat_loop, name=f"heartbeat-{self.config.testbed_id}", daemon=True
        )
        self._heartbeat_thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._heartbeat_thread is not None:
            self._heartbeat_thread.join(timeout=2)

    def _heartbeat_loop(self) -> None:
        url = self.config.server_url + "/testbeds/heartbeat"
        headers = {"Authorization": f"Bearer {self.config.server_token}"}
        with httpx.Client(timeout=5.0) as client:
            while not self._stop.is_set():
                try:
                    client.post(url, json=self.config.descriptor(self.status()), headers=headers)
                except httpx.HTTPError as e:
                    log.debug("heartbeat delivery failed: %s", e)
                self._stop.wait(self.config.heartbeat_interval_s)

    # --- job intake -----------------------------------------------------------

    def submit_job(self, payload: dict) -> tuple[int, dict]:
        try:
            job_id = str(payload.get("job_id") or uuid.uuid4())
            submission_id = str(payload["submission_id"])
            source = payload["source"]
            if payload.get("dut_profile", self.config.dut_profile) != self.config.dut_profile:
                return 400, {
                    "error": "config_mismatch",
                    "detail": f"this testbed runs profile {self.config.dut_profile}",
                }
            if not isinstance(source, str):
                raise KeyError("source")
            test_cases = [
                _JobTestCase(
                    id=str(tc["id"]),
                    capture=CaptureConfig(
                        rate_hz=int(tc["capture"]["rate_hz"]),
                        duration_us=int(tc["capture"]["duration_us"]),
                        pin=str(tc["capture"]["pin"]),
                    ),
                    sessions=tuple(
                        Session(
                            start_us=int(s["start_us"]),
                            period_us=int(s["period_us"]),
                            duty=float(s["duty"]),
                        )
                        for s in tc["sessions"]
                    ),
                )
                for tc in payload["test_cases"]
            ]
            if not test_cases:
                return 400, {"error": "bad_job", "detail": "job has no test cases"}
        except (KeyError, TypeError, ValueError, ModelError) as e:
            return 400, {"error": "bad_job", "detail": str(e)}

        for tc in test_cases:
            if tc.capture.pin not in self.config.observed_pins:
                return 400, {
                    "error": "config_mismatch",
                    "detail": f"pin {tc.capture.pin} is not wired on this testbed",
                }
            if tc.capture.rate_hz > self.config.max_sample_rate_hz:
                return 400, {
                    "error": "config_mismatch",
                    "detail": f"rate {tc.capture.rate_hz} exceeds the engine maximum",
                }

        with self._lock:
            if self._active is not None:
                if self._active == job_id:
                    return 202, {"job_id": job_id}  # idempotent re-post
                return 409, {"error": "busy", "detail": f"job {self._active} in flight"}
            existing = self._jobs.get(job_id)
            if existing is not None:
                return 202, {"job_id": job_id}  # already ran to completion
            record = _JobRecord(
                job_id=job_id,
                submission_id=submission_id,
                status="running",
                created_at=time.time(),
                directory=self.config.artifact_root / job_id,
                test_case_ids=[tc.id for tc in test_cases],
            )
            self._jobs[job_id] = record
            self._active = job_id
        threading.Thread(
            target=self._execute, args=(record, source, test_cases), daemon=True
        ).start()
        return 202, {"job_id": job_id}

    # --- execution ------------------------------------------------------------

    def _execute(self, record: _JobRecord, source: str, test_cases: list[_JobTestCase]) -> None:
        try:
            self._run_job(record, source, test_cases)
            record.status = "done"
        except EngineFault as e:
            shutil.rmtree(record.directory, ignore_errors=True)
            record.status = "failed"
            record.error = f"engine fault: {e}"
            with self._lock:
                self._fault = True
        except Exception as e:  # noqa: BLE001 - never leave a job stuck running
            shutil.rmtree(record.directory, ignore_errors=True)
            record.status = "failed"
            record.error = f"{type(e).__name__}: {e}"
        finally:
            with self._lock:
                if self._active == record.job_id:
                    self._active = None

    def _run_job(self, record: _JobRecord, source: str, test_cases: list[_JobTestCase]) -> None:
        profile = get_profile(self.config.dut_profile)
        try:
            program = assemble(source)
            record.compile_ok = True
        except CompileError as e:
            # Stale-firmware fix: grade the blank program instead, so the
            # artifacts show exactly what an unprogrammed DUT would do.
            program = BLANK_PROGRAM
            record.compile_ok = False
            record.compile_message = str(e)

        if self.config.service_delay_s > 0:
            time.sleep(self.config.service_delay_s)

        record.directory.mkdir(parents=True, exist_ok=True)
        for tc in test_cases:
            # Reset: a fresh machine per test case, proven all-low by running
            # the blank firmware over the capture window's first instant.
            blank_trace = run_program(BLANK_PROGRAM, profile, (), 1)
            if any(blank_trace.pin_events[p] for p in blank_trace.pin_events):
                raise EngineFault("blank firmware left a pin high")
            cap, print_log = engine.capture(program, tc.sessions, tc.capture, profile)
            tc_dir = record.directory / tc.id
            tc_dir.mkdir(parents=True, exist_ok=True)
            (tc_dir / "schedule.csv").write_text(engine.write_schedule(tc.sessions))
            (tc_dir / "capture.rle").write_text(engine.write_capture(cap))
            (tc_dir / "print.log").write_bytes(print_log)

    # --- artifact retrieval ---------------------------------------------------

    def job_view(self, job_id: str) -> dict | None:
        record = self._jobs.get(job_id)
        if record is None:
            return None
        view: dict = {"job_id": record.job_id, "status": record.status}
        if record.status == "done":
            view["compile"] = {"ok": record.compile_ok, "message": record.compile_message}
        if record.status == "failed":
            view["error"] = record.error
        return view

    def artifact_zip(self, job_id: str) -> bytes | None | str:
        """Zip bytes, None for unknown job, or 'running'/'failed' status."""
        record = self._jobs.get(job_id)
        if record is None:
            return None
        if record.status != "done":
            return record.status
        manifest = {
            "job_id": record.job_id,
            "submission_id": record.submission_id,
            "compile": {"ok": record.compile_ok, "message": record.compile_message},
            "test_cases": record.test_case_ids,
        }
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            names = ["manifest.json"]
            payloads = {
                "manifest.json": json.dumps(manifest, sort_keys=True, indent=1).encode()
            }
            for tc_id in record.test_case_ids:
                for fname in ("schedule.csv", "capture.rle", "print.log"):
                    rel = f"{tc_id}/{fname}"
                    names.append(rel)
                    payloads[rel] = (record.directory / tc_id / fname).read_bytes()
            for name in sorted(names):
                info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
                info.compress_type = zipfile.ZIP_DEFLATED
                zf.writestr(info, payloads[name])
        return buf.getvalue()

    def delete_job(self, job_id: str) -> bool:
        with self._lock:
            record = self._jobs.pop(job_id, None)
            if record is not None and self._active == job_id:
                self._active = None
        if record is None:
            return False
        shutil.rmtree(record.directory, ignore_errors=True)
        return True

    def sweep_expired(self) -> None:
        cutoff = time.time() - self.config.artifact_ttl_s
        with self._lock:
            stale = [
                jid
                for jid, rec in self._jobs.items()
                if rec.created_at < cutoff and rec.status != "running"
            ]
        for jid in stale:
            self.delete_job(jid)


def create_app(config: CoordinatorConfig) -> FastAPI:
    coordinator = Coordinator(config)

    @contextlib.asynccontextmanager
    async def _lifespan(_app: FastAPI):
        coordinator.start_heartbeats()
        yield
        coordinator.stop()

    app = FastAPI(title=f"labgrade testbed {config.testbed_id}", lifespan=_lifespan)
    app.state.coordinator = coordinator

    def _unauthorized() -> JSONResponse:
        return JSONResponse(
            {"error": "unauthorized", "detail": "bad or missing bearer token"}, status_code=401
        )

    def _authorized(request: Request) -> bool:
        return request.headers.get("Authorization") == f"Bearer {config.server_token}"

    @app.get("/health")
    def health() -> dict:
        return {
            "status": coordinator.status(),
            "testbed_id": config.testbed_id,
            "config_hash": config.config_hash,
        }

    @app.post("/jobs")
    async def post_job(request: Request) -> JSONResponse:
        if not _authorized(request):
            return _unauthorized()
        coordinator.sweep_expired()
        try:
            payload = await request.json()
        except ValueError:
            return JSONResponse(
                {"error": "bad_job", "detail": "body is not JSON"}, status_code=400
            )
        code, body = coordinator.submit_job(payload)
        return JSONResponse(body, status_code=code)

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str, request: Request) -> JSONResponse:
        if not _authorized(request):
            return _unauthorized()
        view = coordinator.job_view(job_id)
        if view is None:
            return JSONResponse(
                {"error": "not_found", "detail": f"no job {job_id}"}, status_code=404
            )
        return JSONResponse(view)

    @app.get("/jobs/{job_id}/artifacts")
    def get_artifacts(job_id: str, request: Request) -> Response:
        if not _authorized(request):
            return _unauthorized()
        result = coordinator.artifact_zip(job_id)
        if result is None:
            return JSONResponse(
                {"error": "not_found", "detail": f"no job {job_id}"}, status_code=404
            )
        if isinstance(result, str):
            return JSONResponse(
                {"error": "not_ready", "detail": f"job is {result}"}, status_code=409
            )
        return Response(content=result, media_type="application/zip")

    @app.delete("/jobs/{job_id}")
    def delete_job(job_id: str, request: Request) -> Response:
        if not _authorized(request):
            return _unauthorized()
        if not coordinator.delete_job(job_id):
            return JSONResponse(
                {"error": "not_found", "detail": f"no job {job_id}"}, status_code=404
            )
        return Response(status_code=204)

    return app


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Run one simulated testbed coordinator")
    parser.add_argument("--config", required=True, help="INI config file path")
    parser.add_argument("--host", default=None)
    parser.add_argument("--port", type=int, default=None)
    args = parser.parse_args(argv)
    config = CoordinatorConfig.load(args.config)
    host = args.host or config.host
    port = args.port if args.port is not None else config.port
    logging.basicConfig(level=logging.INFO)
    uvicorn.run(create_app(config), host=host, port=port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
