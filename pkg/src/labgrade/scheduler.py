"""Dispatch workers: one thread per online testbed, exactly-once delivery.

Every worker loops: random-jittered wait, health-gate its coordinator, claim
the oldest compatible pending submission (an atomic compare-and-set in the
store), then drive the job through the coordinator and the grading runner.
All recovery paths funnel through two store events: release back to pending
(retry budget permitting) or a permanent fail. The store's guarded writes
make sure a worker that lost its lease cannot finalize the submission.

Workers never share mutable state; the store is the only rendezvous.
"""
from __future__ import annotations

import io
import json
import logging
import random
import shutil
import threading
import zipfile
from dataclasses import dataclass
from pathlib import Path

import httpx

from . import grading, model
from .model import CompileStatus, Submission, TestCase
from .store import Store

log = logging.getLogger("labgrade.scheduler")


@dataclass(frozen=True)
class SchedulerConfig:
    poll_min_s: float = 0.5
    poll_max_s: float = 1.5
    lease_s: float = 120.0
    max_attempts: int = 3  # first try plus R=2 retries
    status_poll_s: float = 0.1
    request_timeout_s: float = 10.0
    grading_timeout_s: float = 30.0
    max_status_errors: int = 5


class _LostClaim(Exception):
    """The lease expired and someone else owns the submission now."""


class _InfraFailure(Exception):
    """Coordinator unreachable or job failed; eligible for retry."""


class DispatchWorker(threading.Thread):
    def __init__(
        self,
        testbed_id: str,
        base_url: str,
        dut_profile: str,
        store: Store,
        artifact_root: Path,
        config: SchedulerConfig,
        testbed_token: str = "",
    ):
        super().__init__(name=f"dispatch-{testbed_id}", daemon=True)
        self.testbed_id = testbed_id
        self.base_url = base_url.rstrip("/")
        self.dut_profile = dut_profile
        self._store = store
        self._artifact_root = artifact_root
        self._config = config
        self._halt = threading.Event()
        self._rng = random.Random()
        # An empty token must mean "no header", not "Bearer " followed by
        # nothing, which is an illegal header value and poisons every request.
        headers = {"Authorization": f"Bearer {testbed_token}"} if testbed_token else {}
        self._client = httpx.Client(timeout=config.request_timeout_s, headers=headers)

    def stop(self) -> None:
        self._halt.set()

    def run(self) -> None:
        try:
            while not self._halt.is_set():
                self._halt.wait(self._rng.uniform(self._config.poll_min_s, self._config.poll_max_s))
                if self._halt.is_set():
                    break
                try:
                    self._poll_once()
                except Exception:  # noqa: BLE001 - a worker must never die silently
                    log.exception("worker %s: poll failed", self.testbed_id)
        finally:
            self._client.close()

    def _poll_once(self) -> None:
        if not self._coordinator_idle():
            return
        sub = self._store.claim_next_pending(
            self.testbed_id, self.dut_profile, self._config.lease_s
        )
        if sub is None:
            return
        self._drive(sub)

    def _coordinator_idle(self) -> bool:
        """Health-gate: never claim work for a dead or busy coordinator."""
        try:
            r = self._client.get(self.base_url + "/health", timeout=2.0)
            return r.status_code == 200 and r.json().get("status") == "idle"
        except httpx.HTTPError:
            return False

    # --- the job pipeline --------------------------------------------------

    def _drive(self, sub: Submission) -> None:
        job_id = f"{sub.id}-a{sub.attempts}"
        test_cases = self._store.test_cases_for(sub.assignment_id)
        try:
            if not test_cases:
                report = model.build_report(
                    CompileStatus(ok=True, message="no test cases"), (), {}
                )
                self._store.apply_event(sub.id, model.StartExecution(self.testbed_id))
                self._store.apply_event(sub.id, model.Complete(self.testbed_id, report))
                return
            self._post_job(sub, job_id, test_cases)
            try:
                self._store.apply_event(sub.id, model.StartExecution(self.testbed_id))
            except (model.StaleClaim, model.IllegalTransition) as e:
                raise _LostClaim(str(e)) from e
            self._await_job(job_id)
            archive = self._fetch_artifacts(job_id)
            tmp_dir = self._artifact_root / f"{sub.id}.tmp-{job_id}"
            try:
                compile_status = self._unpack(archive, tmp_dir, test_cases)
                report = self._grade(compile_status, test_cases, tmp_dir)
                try:
                    self._store.apply_event(sub.id, model.Complete(self.testbed_id, report))
                except (model.StaleClaim, model.IllegalTransition) as e:
                    raise _LostClaim(str(e)) from e
                self._publish_artifacts(sub.id, tmp_dir)
            finally:
                shutil.rmtree(tmp_dir, ignore_errors=True)
            self._delete_job(job_id)
        except _LostClaim as e:
            log.info("worker %s: lost claim on %s: %s", self.testbed_id, sub.id, e)
            self._delete_job(job_id)
        except _InfraFailure as e:
            self._delete_job(job_id)
            self._retry_or_fail(sub, str(e))

    def _post_job(self, sub: Submission, job_id: str, test_cases: tuple[TestCase, ...]) -> None:
        payload = {
            "job_id": job_id,
            "submission_id": sub.id,
            "dut_profile": self.dut_profile,
            "source": sub.source,
            "test_cases": [
                {
                    "id": tc.id,
                    "capture": {
                        "rate_hz": tc.capture.rate_hz,
                        "duration_us": tc.capture.duration_us,
                        "pin": tc.capture.pin,
                    },
                    "sessions": [
                        {"start_us": s.start_us, "period_us": s.period_us, "duty": s.duty}
                        for s in tc.sessions
                    ],
                }
                for tc in test_cases
            ],
        }
        try:
            r = self._client.post(self.base_url + "/jobs", json=payload)
        except httpx.HTTPError as e:
            raise _InfraFailure(f"coordinator unreachable: {e}") from e
        if r.status_code != 202:
            raise _InfraFailure(f"job rejected: {r.status_code} {r.text[:200]}")

    def _await_job(self, job_id: str) -> None:
        errors = 0
        while not self._halt.is_set():
            try:
                r = self._client.get(f"{self.base_url}/jobs/{job_id}")
            except httpx.HTTPError as e:
                errors += 1
                if errors >= self._config.max_status_errors:
                    raise _InfraFailure(f"status polling failed: {e}") from e
                self._halt.wait(self._config.status_poll_s)
                continue
            if r.status_code != 200:
                raise _InfraFailure(f"status poll: {r.status_code} {r.text[:200]}")
            status = r.json().get("status")
            if status == "done":
                return
            if status == "failed":
                raise _InfraFailure(f"coordinator job failed: {r.json().get('error', '')}")
            self._halt.wait(self._config.status_poll_s)
        raise _InfraFailure("worker stopped while awaiting job")

    def _fetch_artifacts(self, job_id: str) -> bytes:
        try:
            r = self._client.get(f"{self.base_url}/jobs/{job_id}/artifacts")
        except httpx.HTTPError as e:
            raise _InfraFailure(f"artifact fetch failed: {e}") from e
        if r.status_code != 200:
            raise _InfraFailure(f"artifact fetch: {r.status_code}")
        return r.content

    def _unpack(
        self, archive: bytes, tmp_dir: Path, test_cases: tuple[TestCase, ...]
    ) -> CompileStatus:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        tmp_dir.mkdir(parents=True)
        try:
            with zipfile.ZipFile(io.BytesIO(archive)) as zf:
                names = set(zf.namelist())
                expected = {
                    f"{tc.id}/{fname}"
                    for tc in test_cases
                    for fname in grading.ARTIFACT_FILES
                } | {"manifest.json"}
                if names != expected:
                    raise _InfraFailure(
                        f"artifact archive incomplete: {sorted(expected - names)} missing"
                    )
                zf.extractall(tmp_dir)
                manifest = json.loads((tmp_dir / "manifest.json").read_text())
        except (zipfile.BadZipFile, KeyError, ValueError) as e:
            raise _InfraFailure(f"artifact archive unreadable: {e}") from e
        compile_info = manifest.get("compile", {})
        return CompileStatus(
            ok=bool(compile_info.get("ok")), message=str(compile_info.get("message", ""))
        )

    def _grade(
        self,
        compile_status: CompileStatus,
        test_cases: tuple[TestCase, ...],
        artifact_base: Path,
    ) -> model.GradeReport:
        results = []
        for tc in test_cases:
            if not compile_status.ok:
                # Grading scripts are bypassed: the report invariant demands
                # all-zero scores, and the blank-firmware artifacts are kept
                # as evidence.
                results.append(
                    model.build_result(
                        tc.id,
                        session_scores=(0.0,) * len(tc.sessions),
                        feedback="source did not assemble; graded as blank firmware",
                    )
                )
                continue
            results.append(
                grading.grade_test_case(
                    tc.id,
                    tc.grading_script,
                    artifact_base / tc.id,
                    timeout_s=self._config.grading_timeout_s,
                )
            )
        weights = {tc.id: tc.weight for tc in test_cases}
        return model.build_report(compile_status, tuple(results), weights)

    def _publish_artifacts(self, submission_id: str, tmp_dir: Path) -> None:
        """Move the graded artifacts into place; only the CAS winner gets here."""
        final = self._artifact_root / submission_id
        shutil.rmtree(final, ignore_errors=True)
        shutil.copytree(tmp_dir, final)

    def _delete_job(self, job_id: str) -> None:
        try:
            self._client.delete(f"{self.base_url}/jobs/{job_id}")
        except httpx.HTTPError:
            pass  # artifact TTL on the coordinator cleans up eventually

    def _retry_or_fail(self, sub: Submission, reason: str) -> None:
        try:
            if sub.attempts >= self._config.max_attempts:
                current = self._store.get_submission(sub.id)
                if current is not None and current.state is model.SubmissionState.CLAIMED:
                    self._store.apply_event(sub.id, model.StartExecution(self.testbed_id))
                self._store.apply_event(
                    sub.id,
                    model.Fail(self.testbed_id, f"gave up after {sub.attempts} attempts: {reason}"),
                )
                log.warning("worker %s: submission %s failed: %s", self.testbed_id, sub.id, reason)
            else:
                self._store.apply_event(sub.id, model.LeaseExpired())
                log.info(
                    "worker %s: requeued %s (attempt %d): %s",
                    self.testbed_id, sub.id, sub.attempts, reason,
                )
        except (model.StaleClaim, model.IllegalTransition):
            pass  # someone else took over; nothing left to do


class WorkerManager:
    """Keeps the running workers in sync with the online testbeds."""

    def __init__(
        self,
        store: Store,
        artifact_root: Path,
        config: SchedulerConfig,
        testbed_token: str = "",
    ):
        self._store = store
        self._artifact_root = artifact_root
        self._config = config
        self._testbed_token = testbed_token
        self._workers: dict[str, DispatchWorker] = {}
        self._lock = threading.Lock()

    def sync(self, online: dict[str, tuple[str, str]]) -> None:
        """online: testbed id -> (base_url, dut_profile)."""
        with self._lock:
            for testbed_id in list(self._workers):
                if testbed_id not in online or not self._workers[testbed_id].is_alive():
                    self._workers.pop(testbed_id).stop()
            for testbed_id, (base_url, profile) in online.items():
                if testbed_id not in self._workers:
                    worker = DispatchWorker(
                        testbed_id, base_url, profile, self._store,
                        self._artifact_root, self._config, self._testbed_token,
                    )
                    self._workers[testbed_id] = worker
                    worker.start()

    def worker_ids(self) -> set[str]:
        with self._lock:
            return {tid for tid, w in self._workers.items() if w.is_alive()}

    def stop_all(self) -> None:
        with self._lock:
            workers = list(self._workers.values())
            self._workers.clear()
        for w in workers:
            w.stop()
        for w in workers:
            w.join(timeout=5)


class LeaseReaper(threading.Thread):
    """Periodically requeues submissions whose lease expired."""

    def __init__(self, store: Store, interval_s: float = 1.0):
        super().__init__(name="lease-reaper", daemon=True)
        self._store = store
        self._interval = interval_s
        self._halt = threading.Event()

    def stop(self) -> None:
        self._halt.set()

    def run(self) -> None:
        while not self._halt.is_set():
            try:
                n = self._store.reap_expired()
                if n:
                    log.info("reaper: requeued %d expired leases", n)
            except Exception:  # noqa: BLE001
                log.exception("reaper failed")
            self._halt.wait(self._interval)
