"""Sqlite-backed persistence with atomic compare-and-set on submission state.

All cross-worker coordination happens here: claims, lease expiry, and result
writes go through one writer transaction each (BEGIN IMMEDIATE), so two
workers can never both own or both finalize a submission. The report_writes
table counts result writes per submission; the exactly-once property is
asserted against it in tests.

Timestamps returned to clients are RFC 3339 UTC with fixed microsecond
width, so lexicographic order equals chronological order (the FIFO queue
sorts on the string). A now_fn hook injects a fake clock in tests.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import secrets
import sqlite3
import threading
import time
from datetime import datetime, timezone
from pathlib import Path

from . import model
from .model import (
    Assignment,
    CaptureConfig,
    Course,
    GradeReport,
    Role,
    Session,
    Submission,
    SubmissionState,
    TestCase,
    User,
    Visibility,
)

_PBKDF2_ITERATIONS = 100_000


def rfc3339(ts: float) -> str:
    return datetime.fromtimestamp(ts, timezone.utc).isoformat(timespec="microseconds")


def parse_rfc3339(text: str) -> float:
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


_SCHEMA = """
CREATE TABLE IF NOT EXISTS users (
    id TEXT PRIMARY KEY,
    username TEXT UNIQUE NOT NULL,
    display_name TEXT NOT NULL,
    pw_hash BLOB NOT NULL,
    salt BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS tokens (
    token TEXT PRIMARY KEY,
    user_id TEXT NOT NULL REFERENCES users(id),
    created_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS courses (
    id TEXT PRIMARY KEY,
    title TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS roles (
    user_id TEXT NOT NULL REFERENCES users(id),
    course_id TEXT NOT NULL REFERENCES courses(id),
    role TEXT NOT NULL,
    PRIMARY KEY (user_id, course_id)
);
CREATE TABLE IF NOT EXISTS assignments (
    id TEXT PRIMARY KEY,
    course_id TEXT NOT NULL REFERENCES courses(id),
    statement TEXT NOT NULL,
    dut_profile TEXT NOT NULL,
    deadline TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS test_cases (
    assignment_id TEXT NOT NULL REFERENCES assignments(id),
    id TEXT NOT NULL,
    visibility TEXT NOT NULL,
    weight REAL NOT NULL,
    grading_script TEXT NOT NULL,
    rate_hz INTEGER NOT NULL,
    duration_us INTEGER NOT NULL,
    pin TEXT NOT NULL,
    sessions TEXT NOT NULL,
    position INTEGER NOT NULL,
    PRIMARY KEY (assignment_id, id)
);
CREATE TABLE IF NOT EXISTS submissions (
    id TEXT PRIMARY KEY,
    assignment_id TEXT NOT NULL REFERENCES assignments(id),
    student_id TEXT NOT NULL REFERENCES users(id),
    source TEXT NOT NULL,
    submitted_at TEXT NOT NULL,
    state TEXT NOT NULL,
    claim_testbed TEXT,
    lease_expires_at REAL,
    attempts INTEGER NOT NULL DEFAULT 0,
    report TEXT,
    graded_at TEXT,
    failure_reason TEXT
);
CREATE INDEX IF NOT EXISTS idx_submissions_queue
    ON submissions (state, submitted_at, id);
CREATE TABLE IF NOT EXISTS report_writes (
    submission_id TEXT PRIMARY KEY,
    writes INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS testbeds (
    id TEXT PRIMARY KEY,
    descriptor TEXT NOT NULL,
    base_url TEXT NOT NULL,
    last_heartbeat REAL NOT NULL
);
"""


class StoreError(Exception):
    pass


class DuplicateKey(StoreError):
    pass


class Store:
    def __init__(self, path: str | Path, now_fn=time.time):
        self._path = str(path)
        self._now = now_fn
        self._local = threading.local()
        with self._conn() as conn:
            conn.executescript(_SCHEMA)

    def _conn(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            # isolation_level=None: plain statements autocommit, and the CAS
            # paths manage BEGIN IMMEDIATE / COMMIT themselves.
            conn = sqlite3.connect(self._path, timeout=30.0, isolation_level=None)
            conn.row_factory = sqlite3.Row
            conn.execute("PRAGMA journal_mode=WAL")
            conn.execute("PRAGMA busy_timeout=30000")
            conn.execute("PRAGMA synchronous=NORMAL")
            self._local.conn = conn
        return conn

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    def now(self) -> float:
        return self._now()

    # --- users and auth ------------------------------------------------

    def create_user(self, username: str, display_name: str, password: str) -> User:
        salt = secrets.token_bytes(16)
        pw_hash = hashlib.pbkdf2_hmac("sha256", password.encode(), salt, _PBKDF2_ITERATIONS)
        user_id = "u-" + secrets.token_hex(8)
        conn = self._conn()
        try:
            with conn:
                conn.execute(
                    "INSERT INTO users (id, username, display_name, pw_hash, salt) "
                    "VALUES (?, ?, ?, ?, ?)",
                    (user_id, username, display_name, pw_hash, salt),
                )
        except sqlite3.IntegrityError:
            raise DuplicateKey(f"username {username!r} taken") from None
        return User(id=user_id, username=username, display_name=display_name)

    def verify_password(self, username: str, password: str) -> User | None:
        row = self._conn().execute(
            "SELECT * FROM users WHERE username = ?", (username,)
        ).fetchone()
        if row is None:
            return None
        expected = hashlib.pbkdf2_hmac(
            "sha256", password.encode(), row["salt"], _PBKDF2_ITERATIONS
        )
        if not secrets.compare_digest(expected, row["pw_hash"]):
            return None
        return User(id=row["id"], username=row["username"], display_name=row["display_name"])

    def issue_token(self, user_id: str) -> str:
        token = secrets.token_hex(16)
        with self._conn() as conn:
            conn.execute(
                "INSERT INTO tokens (token, user_id, created_at) VALUES (?, ?, ?)",
                (token, user_id, self._now()),
            )
        return token

    def user_for_token(self, token: str) -> User | None:
        row = self._conn().execute(
            "SELECT u.* FROM tokens t JOIN users u ON u.id = t.user_id WHERE t.token = ?",
            (token,),
        ).fetchone()
        if row is None:
            return None
        return User(id=row["id"], username=row["username"], display_name=row["display_name"])

    def get_user(self, user_id: str) -> User | None:
        row = self._conn().execute("SELECT * FROM users WHERE id = ?", (user_id,)).fetchone()
        if row is None:
            return None
        return User(id=row["id"], username=row["username"], display_name=row["display_name"])

    # --- courses, roles, assignments ------------------------------------

    def create_course(self, course_id: str, title: str) -> Course:
        try:
            with self._conn() as conn:
                conn.execute(
                    "INSERT INTO courses (id, title) VALUES (?, ?)", (course_id, title)
                )
        except sqlite3.IntegrityError:
            raise DuplicateKey(f"course {course_id!r} exists") from None
        return Course(id=course_id, title=title)

    def get_course(self, course_id: str) -> Course | None:
        row = self._conn().execute(
            "SELECT * FROM courses WHERE id = ?", (course_id,)
        ).fetchone()
        return Course(id=row["id"], title=row["title"]) if row else None

    def set_role(self, user_id: str, course_id: str, role: Role) -> None:
        with self._conn() as conn:
            conn.execute(
                "INSERT INTO roles (user_id, course_id, role) VALUES (?, ?, ?) "
                "ON CONFLICT (user_id, course_id) DO UPDATE SET role = excluded.role",
                (user_id, course_id, role.value),
            )

    def role_of(self, user_id: str, course_id: str) -> Role | None:
        row = self._conn().execute(
            "SELECT role FROM roles WHERE user_id = ? AND course_id = ?",
            (user_id, course_id),
        ).fetchone()
        return Role(row["role"]) if row else None

    def create_assignment(self, a: Assignment) -> None:
        try:
            with self._conn() as conn:
                conn.execute(
                    "INSERT INTO assignments (id, course_id, statement, dut_profile, deadline) "
                    "VALUES (?, ?, ?, ?, ?)",
                    (a.id, a.course_id, a.statement, a.dut_profile, a.deadline),
                )
        except sqlite3.IntegrityError:
            raise DuplicateKey(f"assignment {a.id!r} exists") from None

    def get_assignment(self, assignment_id: str) -> Assignment | None:
        row = self._conn().execute(
            "SELECT * FROM assignments WHERE id = ?", (assignment_id,)
        ).fetchone()
        if row is None:
            return None
        return Assignment(
            id=row["id"],
            course_id=row["course_id"],
            statement=row["statement"],
            dut_profile=row["dut_profile"],
            deadline=row["deadline"],
        )

    def update_deadline(self, assignment_id: str, deadline: str) -> None:
        with self._conn() as conn:
            cur = conn.execute(
                "UPDATE assignments SET deadline = ? WHERE id = ?",
                (deadline, assignment_id),
            )
            if cur.rowcount != 1:
                raise StoreError(f"assignment {assignment_id!r} not found")

    # --- test cases -----------------------------------------------------

    def add_test_case(self, tc: TestCase) -> None:
        sessions_json = json.dumps(
            [{"start_us": s.start_us, "period_us": s.period_us, "duty": s.duty}
             for s in tc.sessions]
        )
        conn = self._conn()
        try:
            conn.execute("BEGIN IMMEDIATE")
            position = conn.execute(
                "SELECT COUNT(*) FROM test_cases WHERE assignment_id = ?",
                (tc.assignment_id,),
            ).fetchone()[0]
            conn.execute(
                "INSERT INTO test_cases (assignment_id, id, visibility, weight, "
                "grading_script, rate_hz, duration_us, pin, sessions, position) "
                "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    tc.assignment_id,
                    tc.id,
                    tc.visibility.value,
                    tc.weight,
                    tc.grading_script,
                    tc.capture.rate_hz,
                    tc.capture.duration_us,
                    tc.capture.pin,
                    sessions_json,
                    position,
                ),
            )
            conn.execute("COMMIT")
        except sqlite3.IntegrityError:
            conn.execute("ROLLBACK")
            raise DuplicateKey(f"test case {tc.id!r} exists") from None
        except BaseException:
            if conn.in_transaction:
                conn.execute("ROLLBACK")
            raise

    def test_cases_for(self, assignment_id: str) -> tuple[TestCase, ...]:
        rows = self._conn().execute(
            "SELECT * FROM test_cases WHERE assignment_id = ? ORDER BY position",
            (assignment_id,),
        ).fetchall()
        out = []
        for row in rows:
            sessions = tuple(
                Session(start_us=s["start_us"], period_us=s["period_us"], duty=s["duty"])
                for s in json.loads(row["sessions"])
            )
            out.append(
                TestCase(
                    id=row["id"],
                    assignment_id=row["assignment_id"],
                    visibility=Visibility(row["visibility"]),
                    weight=row["weight"],
                    grading_script=row["grading_script"],
                    capture=CaptureConfig(
                        rate_hz=row["rate_hz"],
                        duration_us=row["duration_us"],
                        pin=row["pin"],
                    ),
                    sessions=sessions,
                )
            )
        return tuple(out)

    # --- submissions and the lifecycle CAS -------------------------------

    def _row_to_submission(self, row: sqlite3.Row) -> Submission:
        return Submission(
            id=row["id"],
            assignment_id=row["assignment_id"],
            student_id=row["student_id"],
            source=row["source"],
            submitted_at=row["submitted_at"],
            state=SubmissionState(row["state"]),
            claim_testbed=row["claim_testbed"],
            lease_expires_at=row["lease_expires_at"],
            attempts=row["attempts"],
            report=GradeReport.from_json(row["report"]) if row["report"] else None,
            graded_at=row["graded_at"],
            failure_reason=row["failure_reason"],
        )

    def add_submission(self, sub: Submission) -> None:
        with self._conn() as conn:
            conn.execute(
                "INSERT INTO submissions (id, assignment_id, student_id, source, "
                "submitted_at, state, claim_testbed, lease_expires_at, attempts, "
                "report, graded_at, failure_reason) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    sub.id,
                    sub.assignment_id,
                    sub.student_id,
                    sub.source,
                    sub.submitted_at,
                    sub.state.value,
                    sub.claim_testbed,
                    sub.lease_expires_at,
                    sub.attempts,
                    sub.report.to_json() if sub.report else None,
                    sub.graded_at,
                    sub.failure_reason,
                ),
            )

    def get_submission(self, submission_id: str) -> Submission | None:
        row = self._conn().execute(
            "SELECT * FROM submissions WHERE id = ?", (submission_id,)
        ).fetchone()
        return self._row_to_submission(row) if row else None

    def submissions_for_assignment(self, assignment_id: str) -> tuple[Submission, ...]:
        rows = self._conn().execute(
            "SELECT * FROM submissions WHERE assignment_id = ? "
            "ORDER BY submitted_at, id",
            (assignment_id,),
        ).fetchall()
        return tuple(self._row_to_submission(r) for r in rows)

    def _write_submission(self, conn: sqlite3.Connection, old: Submission, new: Submission) -> None:
        """Guarded overwrite: only applies if the row still looks like `old`."""
        cur = conn.execute(
            "UPDATE submissions SET state = ?, claim_testbed = ?, lease_expires_at = ?, "
            "attempts = ?, report = ?, graded_at = ?, failure_reason = ? "
            "WHERE id = ? AND state = ? AND COALESCE(claim_testbed, '') = ?",
            (
                new.state.value,
                new.claim_testbed,
                new.lease_expires_at,
                new.attempts,
                new.report.to_json() if new.report else None,
                new.graded_at,
                new.failure_reason,
                old.id,
                old.state.value,
                old.claim_testbed or "",
            ),
        )
        if cur.rowcount != 1:
            raise model.StaleClaim(f"submission {old.id} changed concurrently")

    def claim_next_pending(
        self, testbed_id: str, dut_profile: str, lease_s: float
    ) -> Submission | None:
        """Atomically claim the oldest pending submission for this profile."""
        conn = self._conn()
        try:
            conn.execute("BEGIN IMMEDIATE")
            row = conn.execute(
                "SELECT s.* FROM submissions s "
                "JOIN assignments a ON a.id = s.assignment_id "
                "WHERE s.state = 'pending' AND a.dut_profile = ? "
                "ORDER BY s.submitted_at, s.id LIMIT 1",
                (dut_profile,),
            ).fetchone()
            if row is None:
                conn.execute("ROLLBACK")
                return None
            sub = self._row_to_submission(row)
            claimed = model.transition(
                sub, model.Claim(testbed_id=testbed_id, lease_expires_at=self._now() + lease_s)
            )
            self._write_submission(conn, sub, claimed)
            conn.execute("COMMIT")
            return claimed
        except BaseException:
            if conn.in_transaction:
                conn.execute("ROLLBACK")
            raise

    def apply_event(self, submission_id: str, event: model.LifecycleEvent) -> Submission:
        """Apply one lifecycle event under the writer lock.

        Raises IllegalTransition or StaleClaim exactly as model.transition
        does; a graded write also bumps the report_writes audit counter.
        """
        conn = self._conn()
        try:
            conn.execute("BEGIN IMMEDIATE")
            row = conn.execute(
                "SELECT * FROM submissions WHERE id = ?", (submission_id,)
            ).fetchone()
            if row is None:
                conn.execute("ROLLBACK")
                raise StoreError(f"submission {submission_id!r} not found")
            sub = self._row_to_submission(row)
            new = model.transition(sub, event)
            if isinstance(event, model.Complete):
                new = dataclasses.replace(new, graded_at=rfc3339(self._now()))
                conn.execute(
                    "INSERT INTO report_writes (submission_id, writes) VALUES (?, 1) "
                    "ON CONFLICT (submission_id) DO UPDATE SET writes = writes + 1",
                    (submission_id,),
                )
            self._write_submission(conn, sub, new)
            conn.execute("COMMIT")
            return new
        except BaseException:
            if conn.in_transaction:
                conn.execute("ROLLBACK")
            raise

    def reap_expired(self) -> int:
        """Requeue every claimed/executing submission whose lease expired."""
        with self._conn() as conn:
            cur = conn.execute(
                "UPDATE submissions SET state = 'pending', claim_testbed = NULL, "
                "lease_expires_at = NULL "
                "WHERE state IN ('claimed', 'executing') AND lease_expires_at < ?",
                (self._now(),),
            )
            return cur.rowcount

    def report_write_counts(self) -> dict[str, int]:
        rows = self._conn().execute("SELECT * FROM report_writes").fetchall()
        return {r["submission_id"]: r["writes"] for r in rows}

    def count_by_state(self) -> dict[str, int]:
        rows = self._conn().execute(
            "SELECT state, COUNT(*) AS n FROM submissions GROUP BY state"
        ).fetchall()
        return {r["state"]: r["n"] for r in rows}

    # --- testbed registry -------------------------------------------------

    def upsert_testbed(self, testbed_id: str, descriptor: dict, base_url: str) -> None:
        with self._conn() as conn:
            conn.execute(
                "INSERT INTO testbeds (id, descriptor, base_url, last_heartbeat) "
                "VALUES (?, ?, ?, ?) ON CONFLICT (id) DO UPDATE SET "
                "descriptor = excluded.descriptor, base_url = excluded.base_url, "
                "last_heartbeat = excluded.last_heartbeat",
                (testbed_id, json.dumps(descriptor), base_url, self._now()),
            )

    def testbeds(self, offline_after_s: float) -> list[dict]:
        """Registry entries with liveness computed from the injected clock."""
        now = self._now()
        rows = self._conn().execute("SELECT * FROM testbeds ORDER BY id").fetchall()
        out = []
        for r in rows:
            out.append(
                {
                    "testbed_id": r["id"],
                    "descriptor": json.loads(r["descriptor"]),
                    "base_url": r["base_url"],
                    "last_heartbeat": rfc3339(r["last_heartbeat"]),
                    "online": (now - r["last_heartbeat"]) <= offline_after_s,
                }
            )
        return out
