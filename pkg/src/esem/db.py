"""Persistence: the eight-table seminar schema on SQLite, plus the mail
outbox and its delivery ledger.

Single-file embedded store with enforced foreign keys. All mutating
operations run inside an immediate (write-locking) transaction, so the
capacity check-and-insert of enroll_atomic is serialized per database and
can never oversell a seminar, no matter how many request threads call in
at once. Each thread gets its own connection.

Entity tables: users, seminars, usersseminars (enrollments), attendancebook
(per-enrollment aggregates), presenthours (per-hour marks), history
(completions), news, files. Infrastructure: outbox + maildeliveries for
the notifier, meta for the schema version.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import date, datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterator, Optional

from . import core, passwords
from .blobstore import BlobStore
from .core import (
    AccessLevel,
    CapacityDecision,
    Seminar,
    SeminarDraft,
    SeminarState,
    User,
    UserDraft,
    ValidationIssue,
    capacity_decision,
    determine_completion,
    parse_threshold,
)

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class StoreError(Exception):
    """Base for persistence-level failures."""


class NotFound(StoreError):
    def __init__(self, entity: str, ident):
        super().__init__(f"{entity} {ident} not found")
        self.entity = entity
        self.ident = ident


class ValidationFailed(StoreError):
    def __init__(self, issues: list[ValidationIssue]):
        super().__init__("; ".join(f"{i.field}: {i.message}" for i in issues))
        self.issues = issues


class DuplicateUsername(StoreError):
    pass


class DuplicateEmail(StoreError):
    pass


class CapacityFull(StoreError):
    pass


class AlreadyEnrolled(StoreError):
    pass


class NotEnrolled(StoreError):
    pass


class SeminarNotOpen(StoreError):
    pass


class AlreadyFinalized(StoreError):
    pass


class TitleCollision(StoreError):
    def __init__(self, user_id: int, title: str):
        super().__init__(
            f"user {user_id} already holds a completion for a seminar titled {title!r}"
        )
        self.user_id = user_id
        self.title = title


class HourOutOfRange(StoreError):
    pass


class UploadTooLarge(StoreError):
    pass


class EmptyUpload(StoreError):
    pass


class HasDependents(StoreError):
    """Delete refused because dependent rows exist and cascade was not set."""


class SchemaVersionMismatch(StoreError):
    pass


# ---------------------------------------------------------------------------
# Row types beyond the core domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Enrollment:
    seminar_id: int
    user_id: int
    enrolled_at: datetime


@dataclass(frozen=True)
class AttendanceSummary:
    seminar_id: int
    user_id: int
    present_count: int
    absent_count: int
    success_mark: Optional[bool]


@dataclass(frozen=True)
class PresenceEntry:
    seminar_id: int
    user_id: int
    hour: int
    present: bool
    recorded_at: datetime


@dataclass(frozen=True)
class CompletionRecord:
    user_id: int
    seminar_title: str
    seminar_id: int
    completed_at: date
    certificate_serial: str


class TargetType:
    EVERYONE = "everyone"
    ROLE = "role"
    SEMINAR = "seminar"
    USER = "user"

    ALL = (EVERYONE, ROLE, SEMINAR, USER)


@dataclass(frozen=True)
class Target:
    type: str
    ref: Optional[int] = None

    def __post_init__(self):
        if self.type not in TargetType.ALL:
            raise ValueError(f"unknown target type {self.type!r}")
        if self.type == TargetType.EVERYONE and self.ref is not None:
            raise ValueError("everyone target takes no reference")
        if self.type != TargetType.EVERYONE and self.ref is None:
            raise ValueError(f"{self.type} target needs a reference")
        if self.type == TargetType.ROLE:
            AccessLevel.parse(self.ref)


@dataclass(frozen=True)
class Announcement:
    news_id: int
    title: str
    body: str
    sender_id: int
    target: Target
    created_at: datetime


@dataclass(frozen=True)
class MaterialFile:
    file_id: int
    seminar_id: int
    uploader_id: int
    name: str
    media_type: str
    size_bytes: int
    content_hash: str
    uploaded_at: datetime


@dataclass(frozen=True)
class OutboxJob:
    job_id: int
    kind: str  # "announcement" | "material"
    ref_id: int
    status: str  # "pending" | "done" | "dead"
    attempts: int
    next_attempt_at: datetime
    last_error: Optional[str]
    created_at: datetime


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

_SCHEMA = """
CREATE TABLE meta (
    key   TEXT PRIMARY KEY,
    value TEXT NOT NULL
);

CREATE TABLE users (
    userid       INTEGER PRIMARY KEY AUTOINCREMENT,
    username     TEXT NOT NULL UNIQUE,
    passwordhash TEXT NOT NULL,
    accesslevel  INTEGER NOT NULL CHECK (accesslevel IN (0, 1, 2)),
    firstname    TEXT NOT NULL DEFAULT '',
    lastname     TEXT NOT NULL DEFAULT '',
    email        TEXT NOT NULL UNIQUE,
    phone        TEXT,
    address      TEXT,
    city         TEXT,
    postalcode   TEXT,
    dateofbirth  TEXT,
    registeredat TEXT NOT NULL,
    lastloginat  TEXT,
    active       INTEGER NOT NULL DEFAULT 1
);

CREATE TABLE seminars (
    semid           INTEGER PRIMARY KEY AUTOINCREMENT,
    title           TEXT NOT NULL,
    description     TEXT NOT NULL DEFAULT '',
    tutorid         INTEGER NOT NULL REFERENCES users(userid),
    maxparticipants INTEGER NOT NULL CHECK (maxparticipants >= 1),
    totalhours      INTEGER NOT NULL CHECK (totalhours >= 1),
    startdate       TEXT NOT NULL,
    enddate         TEXT NOT NULL,
    threshold       TEXT NOT NULL,
    state           TEXT NOT NULL DEFAULT 'open'
                    CHECK (state IN ('open', 'in_progress', 'finalized'))
);

CREATE TABLE usersseminars (
    semid      INTEGER NOT NULL REFERENCES seminars(semid),
    userid     INTEGER NOT NULL REFERENCES users(userid),
    enrolledat TEXT NOT NULL,
    PRIMARY KEY (semid, userid)
);

CREATE TABLE attendancebook (
    semid        INTEGER NOT NULL,
    userid       INTEGER NOT NULL,
    presentcount INTEGER NOT NULL DEFAULT 0,
    absentcount  INTEGER NOT NULL DEFAULT 0,
    successmark  INTEGER,
    PRIMARY KEY (semid, userid),
    FOREIGN KEY (semid, userid) REFERENCES usersseminars(semid, userid)
);

CREATE TABLE presenthours (
    semid      INTEGER NOT NULL,
    userid     INTEGER NOT NULL,
    hour       INTEGER NOT NULL CHECK (hour >= 1),
    present    INTEGER NOT NULL CHECK (present IN (0, 1)),
    recordedat TEXT NOT NULL,
    PRIMARY KEY (semid, userid, hour),
    FOREIGN KEY (semid, userid) REFERENCES usersseminars(semid, userid)
);

CREATE TABLE history (
    userid      INTEGER NOT NULL REFERENCES users(userid),
    semtitle    TEXT NOT NULL,
    semid       INTEGER NOT NULL REFERENCES seminars(semid),
    completedat TEXT NOT NULL,
    certserial  TEXT NOT NULL UNIQUE,
    PRIMARY KEY (userid, semtitle)
);

CREATE TABLE news (
    newsid     INTEGER PRIMARY KEY AUTOINCREMENT,
    title      TEXT NOT NULL,
    body       TEXT NOT NULL DEFAULT '',
    senderid   INTEGER NOT NULL REFERENCES users(userid),
    targettype TEXT NOT NULL CHECK (targettype IN ('everyone', 'role', 'seminar', 'user')),
    targetid   INTEGER,
    createdat  TEXT NOT NULL
);

CREATE TABLE files (
    fileid      INTEGER PRIMARY KEY AUTOINCREMENT,
    semid       INTEGER NOT NULL REFERENCES seminars(semid),
    uploaderid  INTEGER NOT NULL REFERENCES users(userid),
    name        TEXT NOT NULL,
    mediatype   TEXT NOT NULL,
    sizebytes   INTEGER NOT NULL CHECK (sizebytes > 0),
    contenthash TEXT NOT NULL,
    uploadedat  TEXT NOT NULL
);

CREATE TABLE outbox (
    jobid         INTEGER PRIMARY KEY AUTOINCREMENT,
    kind          TEXT NOT NULL CHECK (kind IN ('announcement', 'material')),
    refid         INTEGER NOT NULL,
    status        TEXT NOT NULL DEFAULT 'pending' CHECK (status IN ('pending', 'done', 'dead')),
    attempts      INTEGER NOT NULL DEFAULT 0,
    nextattemptat TEXT NOT NULL,
    lasterror     TEXT,
    createdat     TEXT NOT NULL
);

CREATE TABLE maildeliveries (
    kind      TEXT NOT NULL,
    refid     INTEGER NOT NULL,
    recipient TEXT NOT NULL,
    sentat    TEXT NOT NULL,
    PRIMARY KEY (kind, refid, recipient)
);
"""

# Export order: parents before children so import can insert in file order.
_EXPORT_TABLES: list[tuple[str, list[str], list[str]]] = [
    # (table, columns in schema order, order-by key columns)
    ("users",
     ["userid", "username", "passwordhash", "accesslevel", "firstname", "lastname",
      "email", "phone", "address", "city", "postalcode", "dateofbirth",
      "registeredat", "lastloginat", "active"],
     ["userid"]),
    ("seminars",
     ["semid", "title", "description", "tutorid", "maxparticipants", "totalhours",
      "startdate", "enddate", "threshold", "state"],
     ["semid"]),
    ("usersseminars", ["semid", "userid", "enrolledat"], ["semid", "userid"]),
    ("attendancebook",
     ["semid", "userid", "presentcount", "absentcount", "successmark"],
     ["semid", "userid"]),
    ("presenthours",
     ["semid", "userid", "hour", "present", "recordedat"],
     ["semid", "userid", "hour"]),
    ("history",
     ["userid", "semtitle", "semid", "completedat", "certserial"],
     ["userid", "semtitle"]),
    ("news",
     ["newsid", "title", "body", "senderid", "targettype", "targetid", "createdat"],
     ["newsid"]),
    ("files",
     ["fileid", "semid", "uploaderid", "name", "mediatype", "sizebytes",
      "contenthash", "uploadedat"],
     ["fileid"]),
    ("outbox",
     ["jobid", "kind", "refid", "status", "attempts", "nextattemptat",
      "lasterror", "createdat"],
     ["jobid"]),
    ("maildeliveries", ["kind", "refid", "recipient", "sentat"], ["kind", "refid", "recipient"]),
]

_EXPORT_HEADER = f"esem-export {SCHEMA_VERSION}"


def _iso(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat()


def _parse_dt(raw: Optional[str]) -> Optional[datetime]:
    return datetime.fromisoformat(raw) if raw else None


def _parse_date(raw: Optional[str]) -> Optional[date]:
    return date.fromisoformat(raw) if raw else None


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


def certificate_serial(user_id: int, seminar_id: int, completed_at: date) -> str:
    """16-hex-char serial derived from the completion identity."""
    material = f"{user_id}:{seminar_id}:{completed_at.isoformat()}"
    return hashlib.sha256(material.encode()).hexdigest()[:16]


class Database:
    """One instance per process; hand it to every module that needs storage."""

    def __init__(
        self,
        path: str | Path,
        blob_dir: str | Path | None = None,
        hash_iterations: int = passwords.DEFAULT_ITERATIONS,
        clock: Callable[[], datetime] = _utcnow,
    ):
        self.path = str(path)
        self.hash_iterations = hash_iterations
        self.clock = clock
        self.blobs = BlobStore(blob_dir) if blob_dir is not None else None
        self._local = threading.local()
        self._all_conns: list[sqlite3.Connection] = []
        self._conns_lock = threading.Lock()
        self._check_schema_version()

    # -- connections --------------------------------------------------------

    def _conn(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = sqlite3.connect(
                self.path, timeout=30.0, isolation_level=None, check_same_thread=False
            )
            conn.row_factory = sqlite3.Row
            conn.execute("PRAGMA foreign_keys = ON")
            conn.execute("PRAGMA busy_timeout = 30000")
            conn.execute("PRAGMA journal_mode = WAL")
            conn.execute("PRAGMA synchronous = NORMAL")
            self._local.conn = conn
            with self._conns_lock:
                self._all_conns.append(conn)
        return conn

    def close(self) -> None:
        with self._conns_lock:
            for conn in self._all_conns:
                try:
                    conn.close()
                except sqlite3.Error:
                    pass
            self._all_conns.clear()
        self._local = threading.local()

    @contextmanager
    def transaction(self, write: bool = False) -> Iterator[sqlite3.Connection]:
        """Explicit transaction; IMMEDIATE when writing so the capacity
        check and the insert happen under one write lock."""
        conn = self._conn()
        if conn.in_transaction:
            # nested use from the same thread joins the outer transaction
            yield conn
            return
        conn.execute("BEGIN IMMEDIATE" if write else "BEGIN")
        try:
            yield conn
        except BaseException:
            conn.execute("ROLLBACK")
            raise
        conn.execute("COMMIT")

    # -- schema --------------------------------------------------------------

    @staticmethod
    def init_schema(path: str | Path) -> None:
        conn = sqlite3.connect(str(path))
        try:
            conn.executescript(_SCHEMA)
            conn.execute(
                "INSERT INTO meta (key, value) VALUES ('schema_version', ?)",
                (str(SCHEMA_VERSION),),
            )
            conn.commit()
        finally:
            conn.close()

    def _check_schema_version(self) -> None:
        if not Path(self.path).exists():
            raise NotFound("database file", self.path)
        row = self._conn().execute(
            "SELECT value FROM meta WHERE key = 'schema_version'"
        ).fetchone()
        if row is None or int(row["value"]) != SCHEMA_VERSION:
            found = row["value"] if row else "none"
            raise SchemaVersionMismatch(
                f"database schema version {found}, expected {SCHEMA_VERSION}"
            )

    # -- users ---------------------------------------------------------------

    def _user_from_row(self, row: sqlite3.Row) -> User:
        return User(
            user_id=row["userid"],
            username=row["username"],
            password_hash=row["passwordhash"],
            access_level=AccessLevel(row["accesslevel"]),
            first_name=row["firstname"],
            last_name=row["lastname"],
            email=row["email"],
            phone=row["phone"],
            address=row["address"],
            city=row["city"],
            postal_code=row["postalcode"],
            date_of_birth=_parse_date(row["dateofbirth"]),
            registered_at=_parse_dt(row["registeredat"]),
            last_login_at=_parse_dt(row["lastloginat"]),
            active=bool(row["active"]),
        )

    def create_user(self, draft: UserDraft) -> User:
        issues = core.validate_user(draft)
        if issues:
            raise ValidationFailed(issues)
        pw_hash = passwords.hash_password(draft.password, self.hash_iterations)
        now = _iso(self.clock())
        with self.transaction(write=True) as conn:
            if conn.execute(
                "SELECT 1 FROM users WHERE username = ?", (draft.username,)
            ).fetchone():
                raise DuplicateUsername(draft.username)
            if conn.execute(
                "SELECT 1 FROM users WHERE email = ?", (draft.email,)
            ).fetchone():
                raise DuplicateEmail(draft.email)
            cur = conn.execute(
                """INSERT INTO users (username, passwordhash, accesslevel, firstname,
                     lastname, email, phone, address, city, postalcode, dateofbirth,
                     registeredat, lastloginat, active)
                   VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, NULL, 1)""",
                (
                    draft.username,
                    pw_hash,
                    AccessLevel.parse(draft.access_level).value,
                    draft.first_name,
                    draft.last_name,
                    draft.email,
                    draft.phone,
                    draft.address,
                    draft.city,
                    draft.postal_code,
                    draft.date_of_birth.isoformat() if draft.date_of_birth else None,
                    now,
                ),
            )
            return self.get_user(cur.lastrowid)

    def get_user(self, user_id: int) -> User:
        row = self._conn().execute(
            "SELECT * FROM users WHERE userid = ?", (user_id,)
        ).fetchone()
        if row is None:
            raise NotFound("user", user_id)
        return self._user_from_row(row)

    def get_user_by_username(self, username: str) -> Optional[User]:
        row = self._conn().execute(
            "SELECT * FROM users WHERE username = ?", (username,)
        ).fetchone()
        return self._user_from_row(row) if row else None

    def list_users(self, limit: int = 50, offset: int = 0) -> list[User]:
        rows = self._conn().execute(
            "SELECT * FROM users ORDER BY userid LIMIT ? OFFSET ?", (limit, offset)
        ).fetchall()
        return [self._user_from_row(r) for r in rows]

    _PROFILE_FIELDS = {
        "first_name": "firstname",
        "last_name": "lastname",
        "email": "email",
        "phone": "phone",
        "address": "address",
        "city": "city",
        "postal_code": "postalcode",
        "date_of_birth": "dateofbirth",
        "active": "active",
    }

    def update_user(self, user_id: int, changes: dict) -> User:
        """Profile fields, email, active flag, password. Username and access
        level are fixed at creation."""
        unknown = set(changes) - set(self._PROFILE_FIELDS) - {"password"}
        if unknown:
            raise ValidationFailed(
                [ValidationIssue(f, "field cannot be updated") for f in sorted(unknown)]
            )
        issues = []
        if "email" in changes and not core._EMAIL_RE.match(changes["email"] or ""):
            issues.append(ValidationIssue("email", "not a valid email address"))
        if "password" in changes and not changes["password"]:
            issues.append(ValidationIssue("password", "password must not be empty"))
        if issues:
            raise ValidationFailed(issues)
        with self.transaction(write=True) as conn:
            self.get_user(user_id)
            if "email" in changes:
                if conn.execute(
                    "SELECT 1 FROM users WHERE email = ? AND userid != ?",
                    (changes["email"], user_id),
                ).fetchone():
                    raise DuplicateEmail(changes["email"])
            sets, params = [], []
            for field, column in self._PROFILE_FIELDS.items():
                if field not in changes:
                    continue
                value = changes[field]
                if field == "date_of_birth" and value is not None:
                    value = date.fromisoformat(value) if isinstance(value, str) else value
                    value = value.isoformat()
                if field == "active":
                    value = 1 if value else 0
                sets.append(f"{column} = ?")
                params.append(value)
            if "password" in changes:
                sets.append("passwordhash = ?")
                params.append(
                    passwords.hash_password(changes["password"], self.hash_iterations)
                )
            if sets:
                params.append(user_id)
                conn.execute(f"UPDATE users SET {', '.join(sets)} WHERE userid = ?", params)
            return self.get_user(user_id)

    def touch_last_login(self, user_id: int) -> None:
        with self.transaction(write=True) as conn:
            conn.execute(
                "UPDATE users SET lastloginat = ? WHERE userid = ?",
                (_iso(self.clock()), user_id),
            )

    def delete_user(self, user_id: int, cascade: bool = False) -> None:
        with self.transaction(write=True) as conn:
            self.get_user(user_id)
            owned = [
                r["semid"]
                for r in conn.execute(
                    "SELECT semid FROM seminars WHERE tutorid = ?", (user_id,)
                )
            ]
            dependents = owned or conn.execute(
                """SELECT 1 FROM usersseminars WHERE userid = ?
                   UNION SELECT 1 FROM history WHERE userid = ?
                   UNION SELECT 1 FROM news WHERE senderid = ?
                   UNION SELECT 1 FROM files WHERE uploaderid = ?""",
                (user_id, user_id, user_id, user_id),
            ).fetchone()
            if dependents and not cascade:
                raise HasDependents(f"user {user_id} has dependent records")
            for semid in owned:
                self.delete_seminar(semid, cascade=True)
            conn.execute("DELETE FROM presenthours WHERE userid = ?", (user_id,))
            conn.execute("DELETE FROM attendancebook WHERE userid = ?", (user_id,))
            conn.execute("DELETE FROM usersseminars WHERE userid = ?", (user_id,))
            conn.execute("DELETE FROM history WHERE userid = ?", (user_id,))
            conn.execute("DELETE FROM news WHERE senderid = ?", (user_id,))
            conn.execute("DELETE FROM files WHERE uploaderid = ?", (user_id,))
            conn.execute("DELETE FROM users WHERE userid = ?", (user_id,))

    def verify_login(self, username: str, password: str) -> Optional[User]:
        user = self.get_user_by_username(username)
        if user is None or not user.active:
            return None
        if not passwords.verify_password(password, user.password_hash):
            return None
        self.touch_last_login(user.user_id)
        return self.get_user(user.user_id)

    # -- seminars ------------------------------------------------------------

    def _seminar_from_row(self, row: sqlite3.Row) -> Seminar:
        return Seminar(
            seminar_id=row["semid"],
            title=row["title"],
            description=row["description"],
            tutor_id=row["tutorid"],
            max_participants=row["maxparticipants"],
            total_hours=row["totalhours"],
            start_date=date.fromisoformat(row["startdate"]),
            end_date=date.fromisoformat(row["enddate"]),
            completion_threshold=Fraction(row["threshold"]),
            state=SeminarState(row["state"]),
        )

    def create_seminar(self, draft: SeminarDraft) -> Seminar:
        with self.transaction(write=True) as conn:
            try:
                tutor = self.get_user(draft.tutor_id)
            except NotFound:
                tutor = None
            issues = core.validate_seminar(draft, tutor)
            if issues:
                raise ValidationFailed(issues)
            cur = conn.execute(
                """INSERT INTO seminars (title, description, tutorid, maxparticipants,
                     totalhours, startdate, enddate, threshold, state)
                   VALUES (?, ?, ?, ?, ?, ?, ?, ?, 'open')""",
                (
                    draft.title,
                    draft.description,
                    draft.tutor_id,
                    draft.max_participants,
                    draft.total_hours,
                    draft.start_date.isoformat(),
                    draft.end_date.isoformat(),
                    str(draft.completion_threshold),
                ),
            )
            return self.get_seminar(cur.lastrowid)

    def get_seminar(self, seminar_id: int) -> Seminar:
        row = self._conn().execute(
            "SELECT * FROM seminars WHERE semid = ?", (seminar_id,)
        ).fetchone()
        if row is None:
            raise NotFound("seminar", seminar_id)
        return self._seminar_from_row(row)

    def enrolled_count(self, seminar_id: int) -> int:
        return self._conn().execute(
            "SELECT COUNT(*) AS n FROM usersseminars WHERE semid = ?", (seminar_id,)
        ).fetchone()["n"]

    def list_seminars(
        self, only_open: bool = False, limit: int = 50, offset: int = 0
    ) -> list[tuple[Seminar, int]]:
        """Seminars with their live enrollment count, one snapshot."""
        where = "WHERE s.state = 'open'" if only_open else ""
        rows = self._conn().execute(
            f"""SELECT s.*, COUNT(us.userid) AS enrolled
                FROM seminars s LEFT JOIN usersseminars us ON us.semid = s.semid
                {where}
                GROUP BY s.semid ORDER BY s.semid LIMIT ? OFFSET ?""",
            (limit, offset),
        ).fetchall()
        return [(self._seminar_from_row(r), r["enrolled"]) for r in rows]

    _SEMINAR_FIELDS = {
        "title", "description", "max_participants", "total_hours",
        "start_date", "end_date", "completion_threshold", "state",
    }

    def update_seminar(self, seminar_id: int, changes: dict) -> Seminar:
        unknown = set(changes) - self._SEMINAR_FIELDS
        if unknown:
            raise ValidationFailed(
                [ValidationIssue(f, "field cannot be updated") for f in sorted(unknown)]
            )
        with self.transaction(write=True) as conn:
            current = self.get_seminar(seminar_id)
            if current.state is SeminarState.FINALIZED:
                raise AlreadyFinalized(f"seminar {seminar_id} is finalized")
            new_state = current.state
            if "state" in changes:
                try:
                    new_state = SeminarState(changes["state"])
                except ValueError:
                    raise ValidationFailed(
                        [ValidationIssue("state", "unknown seminar state")]
                    )
                if not current.state.can_transition_to(new_state):
                    raise ValidationFailed(
                        [ValidationIssue(
                            "state",
                            f"cannot go from {current.state.value} to {new_state.value}",
                        )]
                    )
            draft = SeminarDraft(
                title=changes.get("title", current.title),
                description=changes.get("description", current.description),
                tutor_id=current.tutor_id,
                max_participants=changes.get("max_participants", current.max_participants),
                total_hours=changes.get("total_hours", current.total_hours),
                start_date=_coerce_date(changes.get("start_date", current.start_date)),
                end_date=_coerce_date(changes.get("end_date", current.end_date)),
                completion_threshold=(
                    parse_threshold(changes["completion_threshold"])
                    if "completion_threshold" in changes
                    else current.completion_threshold
                ),
            )
            issues = core.validate_seminar(draft, self.get_user(current.tutor_id))
            enrolled = self.enrolled_count(seminar_id)
            if draft.max_participants < enrolled:
                issues.append(
                    ValidationIssue(
                        "max_participants",
                        f"capacity cannot drop below the {enrolled} already enrolled",
                    )
                )
            if issues:
                raise ValidationFailed(issues)
            conn.execute(
                """UPDATE seminars SET title=?, description=?, maxparticipants=?,
                     totalhours=?, startdate=?, enddate=?, threshold=?, state=?
                   WHERE semid = ?""",
                (
                    draft.title,
                    draft.description,
                    draft.max_participants,
                    draft.total_hours,
                    draft.start_date.isoformat(),
                    draft.end_date.isoformat(),
                    str(draft.completion_threshold),
                    new_state.value,
                    seminar_id,
                ),
            )
            return self.get_seminar(seminar_id)

    def delete_seminar(self, seminar_id: int, cascade: bool = False) -> None:
        with self.transaction(write=True) as conn:
            self.get_seminar(seminar_id)
            has_rows = conn.execute(
                """SELECT 1 FROM usersseminars WHERE semid = ?
                   UNION SELECT 1 FROM history WHERE semid = ?
                   UNION SELECT 1 FROM files WHERE semid = ?
                   UNION SELECT 1 FROM news WHERE targettype = 'seminar' AND targetid = ?""",
                (seminar_id, seminar_id, seminar_id, seminar_id),
            ).fetchone()
            if has_rows and not cascade:
                raise HasDependents(f"seminar {seminar_id} has dependent records")
            conn.execute("DELETE FROM presenthours WHERE semid = ?", (seminar_id,))
            conn.execute("DELETE FROM attendancebook WHERE semid = ?", (seminar_id,))
            conn.execute("DELETE FROM usersseminars WHERE semid = ?", (seminar_id,))
            conn.execute("DELETE FROM history WHERE semid = ?", (seminar_id,))
            conn.execute("DELETE FROM files WHERE semid = ?", (seminar_id,))
            conn.execute(
                "DELETE FROM news WHERE targettype = 'seminar' AND targetid = ?",
                (seminar_id,),
            )
            conn.execute("DELETE FROM seminars WHERE semid = ?", (seminar_id,))

    # -- enrollment ----------------------------------------------------------

    def enroll_atomic(self, seminar_id: int, user_id: int) -> Enrollment:
        """Count-then-insert under a single write lock; the capacity limit
        holds under any interleaving of concurrent callers."""
        with self.transaction(write=True) as conn:
            seminar = self.get_seminar(seminar_id)
            user = self.get_user(user_id)
            if user.access_level is not AccessLevel.STUDENT:
                raise ValidationFailed(
                    [ValidationIssue("user_id", "only students enroll in seminars")]
                )
            if not user.active:
                raise ValidationFailed([ValidationIssue("user_id", "account is inactive")])
            if seminar.state is not SeminarState.OPEN:
                raise SeminarNotOpen(f"seminar {seminar_id} is {seminar.state.value}")
            if conn.execute(
                "SELECT 1 FROM usersseminars WHERE semid = ? AND userid = ?",
                (seminar_id, user_id),
            ).fetchone():
                raise AlreadyEnrolled(f"user {user_id} in seminar {seminar_id}")
            decision = capacity_decision(
                self.enrolled_count(seminar_id), seminar.max_participants
            )
            if decision is CapacityDecision.REFUSE:
                raise CapacityFull(
                    f"seminar {seminar_id} is at capacity {seminar.max_participants}"
                )
            now = self.clock()
            conn.execute(
                "INSERT INTO usersseminars (semid, userid, enrolledat) VALUES (?, ?, ?)",
                (seminar_id, user_id, _iso(now)),
            )
            conn.execute(
                "INSERT INTO attendancebook (semid, userid) VALUES (?, ?)",
                (seminar_id, user_id),
            )
            return Enrollment(seminar_id, user_id, now)

    def get_enrollment(self, seminar_id: int, user_id: int) -> Optional[Enrollment]:
        row = self._conn().execute(
            "SELECT * FROM usersseminars WHERE semid = ? AND userid = ?",
            (seminar_id, user_id),
        ).fetchone()
        if row is None:
            return None
        return Enrollment(row["semid"], row["userid"], _parse_dt(row["enrolledat"]))

    def unenroll(self, seminar_id: int, user_id: int, allow_in_progress: bool = False) -> None:
        """Remove an enrollment and its marks. Students may only leave while
        the seminar is still open; tutors may remove participants until
        finalization."""
        with self.transaction(write=True) as conn:
            seminar = self.get_seminar(seminar_id)
            if self.get_enrollment(seminar_id, user_id) is None:
                raise NotEnrolled(f"user {user_id} not in seminar {seminar_id}")
            allowed = (SeminarState.OPEN, SeminarState.IN_PROGRESS) if allow_in_progress \
                else (SeminarState.OPEN,)
            if seminar.state not in allowed:
                raise SeminarNotOpen(f"seminar {seminar_id} is {seminar.state.value}")
            conn.execute(
                "DELETE FROM presenthours WHERE semid = ? AND userid = ?",
                (seminar_id, user_id),
            )
            conn.execute(
                "DELETE FROM attendancebook WHERE semid = ? AND userid = ?",
                (seminar_id, user_id),
            )
            conn.execute(
                "DELETE FROM usersseminars WHERE semid = ? AND userid = ?",
                (seminar_id, user_id),
            )

    def list_participants(self, seminar_id: int) -> list[tuple[User, AttendanceSummary]]:
        self.get_seminar(seminar_id)
        rows = self._conn().execute(
            """SELECT u.*, ab.presentcount, ab.absentcount, ab.successmark
               FROM usersseminars us
               JOIN users u ON u.userid = us.userid
               JOIN attendancebook ab ON ab.semid = us.semid AND ab.userid = us.userid
               WHERE us.semid = ? ORDER BY u.userid""",
            (seminar_id,),
        ).fetchall()
        out = []
        for r in rows:
            summary = AttendanceSummary(
                seminar_id=seminar_id,
                user_id=r["userid"],
                present_count=r["presentcount"],
                absent_count=r["absentcount"],
                success_mark=None if r["successmark"] is None else bool(r["successmark"]),
            )
            out.append((self._user_from_row(r), summary))
        return out

    # -- attendance ----------------------------------------------------------

    def record_presence(
        self, seminar_id: int, user_id: int, hour: int, present: bool
    ) -> PresenceEntry:
        """Upsert one hourly mark and keep the attendancebook aggregates in
        step within the same transaction."""
        with self.transaction(write=True) as conn:
            seminar = self.get_seminar(seminar_id)
            if seminar.state is SeminarState.FINALIZED:
                raise AlreadyFinalized(f"seminar {seminar_id} is finalized")
            if self.get_enrollment(seminar_id, user_id) is None:
                raise NotEnrolled(f"user {user_id} not in seminar {seminar_id}")
            if not (1 <= hour <= seminar.total_hours):
                raise HourOutOfRange(
                    f"hour {hour} outside [1, {seminar.total_hours}]"
                )
            old = conn.execute(
                "SELECT present FROM presenthours WHERE semid = ? AND userid = ? AND hour = ?",
                (seminar_id, user_id, hour),
            ).fetchone()
            now = self.clock()
            conn.execute(
                """INSERT INTO presenthours (semid, userid, hour, present, recordedat)
                   VALUES (?, ?, ?, ?, ?)
                   ON CONFLICT (semid, userid, hour)
                   DO UPDATE SET present = excluded.present, recordedat = excluded.recordedat""",
                (seminar_id, user_id, hour, 1 if present else 0, _iso(now)),
            )
            d_present = (1 if present else 0) - (old["present"] if old else 0)
            d_absent = (0 if present else 1) - ((1 - old["present"]) if old else 0)
            if d_present or d_absent:
                conn.execute(
                    """UPDATE attendancebook
                       SET presentcount = presentcount + ?, absentcount = absentcount + ?
                       WHERE semid = ? AND userid = ?""",
                    (d_present, d_absent, seminar_id, user_id),
                )
            return PresenceEntry(seminar_id, user_id, hour, present, now)

    def list_presence(
        self, seminar_id: int, user_id: Optional[int] = None
    ) -> list[PresenceEntry]:
        sql = "SELECT * FROM presenthours WHERE semid = ?"
        params: list = [seminar_id]
        if user_id is not None:
            sql += " AND userid = ?"
            params.append(user_id)
        sql += " ORDER BY userid, hour"
        return [
            PresenceEntry(
                r["semid"], r["userid"], r["hour"], bool(r["present"]),
                _parse_dt(r["recordedat"]),
            )
            for r in self._conn().execute(sql, params)
        ]

    def get_summary(self, seminar_id: int, user_id: int) -> AttendanceSummary:
        row = self._conn().execute(
            "SELECT * FROM attendancebook WHERE semid = ? AND userid = ?",
            (seminar_id, user_id),
        ).fetchone()
        if row is None:
            raise NotEnrolled(f"user {user_id} not in seminar {seminar_id}")
        return AttendanceSummary(
            seminar_id=seminar_id,
            user_id=user_id,
            present_count=row["presentcount"],
            absent_count=row["absentcount"],
            success_mark=None if row["successmark"] is None else bool(row["successmark"]),
        )

    def set_success_mark(
        self, seminar_id: int, user_id: int, mark: Optional[bool]
    ) -> AttendanceSummary:
        with self.transaction(write=True) as conn:
            seminar = self.get_seminar(seminar_id)
            if seminar.state is SeminarState.FINALIZED:
                raise AlreadyFinalized(f"seminar {seminar_id} is finalized")
            self.get_summary(seminar_id, user_id)
            conn.execute(
                "UPDATE attendancebook SET successmark = ? WHERE semid = ? AND userid = ?",
                (None if mark is None else (1 if mark else 0), seminar_id, user_id),
            )
            return self.get_summary(seminar_id, user_id)

    # -- finalization and history ---------------------------------------------

    def finalize_seminar(
        self, seminar_id: int, completed_on: Optional[date] = None
    ) -> list[CompletionRecord]:
        """Close the book: unmarked hours count as absent, the ratio rule
        (or an explicit tutor mark) decides success, one history row per
        successful participant. Second call is rejected."""
        with self.transaction(write=True) as conn:
            seminar = self.get_seminar(seminar_id)
            if seminar.state is SeminarState.FINALIZED:
                raise AlreadyFinalized(f"seminar {seminar_id} already finalized")
            completed = completed_on or self.clock().date()
            records: list[CompletionRecord] = []
            for user, summary in self.list_participants(seminar_id):
                if summary.success_mark is not None:
                    passed = summary.success_mark
                else:
                    passed = determine_completion(
                        summary.present_count,
                        seminar.total_hours,
                        seminar.completion_threshold,
                    )
                if not passed:
                    continue
                if conn.execute(
                    "SELECT 1 FROM history WHERE userid = ? AND semtitle = ?",
                    (user.user_id, seminar.title),
                ).fetchone():
                    raise TitleCollision(user.user_id, seminar.title)
                serial = certificate_serial(user.user_id, seminar_id, completed)
                conn.execute(
                    """INSERT INTO history (userid, semtitle, semid, completedat, certserial)
                       VALUES (?, ?, ?, ?, ?)""",
                    (user.user_id, seminar.title, seminar_id, completed.isoformat(), serial),
                )
                records.append(
                    CompletionRecord(user.user_id, seminar.title, seminar_id, completed, serial)
                )
            conn.execute(
                "UPDATE seminars SET state = 'finalized' WHERE semid = ?", (seminar_id,)
            )
            return records

    def participation_history(self, user_id: int) -> list[CompletionRecord]:
        self.get_user(user_id)
        rows = self._conn().execute(
            "SELECT * FROM history WHERE userid = ? ORDER BY completedat, semtitle",
            (user_id,),
        ).fetchall()
        return [
            CompletionRecord(
                r["userid"], r["semtitle"], r["semid"],
                date.fromisoformat(r["completedat"]), r["certserial"],
            )
            for r in rows
        ]

    def get_completion(self, user_id: int, seminar_id: int) -> Optional[CompletionRecord]:
        row = self._conn().execute(
            "SELECT * FROM history WHERE userid = ? AND semid = ?",
            (user_id, seminar_id),
        ).fetchone()
        if row is None:
            return None
        return CompletionRecord(
            row["userid"], row["semtitle"], row["semid"],
            date.fromisoformat(row["completedat"]), row["certserial"],
        )

    # -- announcements ---------------------------------------------------------

    def _announcement_from_row(self, row: sqlite3.Row) -> Announcement:
        return Announcement(
            news_id=row["newsid"],
            title=row["title"],
            body=row["body"],
            sender_id=row["senderid"],
            target=Target(row["targettype"], row["targetid"]),
            created_at=_parse_dt(row["createdat"]),
        )

    def create_announcement(
        self, title: str, body: str, sender_id: int, target: Target
    ) -> Announcement:
        if not title or not title.strip():
            raise ValidationFailed([ValidationIssue("title", "title must not be empty")])
        with self.transaction(write=True) as conn:
            self.get_user(sender_id)
            if target.type == TargetType.SEMINAR:
                self.get_seminar(target.ref)
            elif target.type == TargetType.USER:
                self.get_user(target.ref)
            cur = conn.execute(
                """INSERT INTO news (title, body, senderid, targettype, targetid, createdat)
                   VALUES (?, ?, ?, ?, ?, ?)""",
                (title, body, sender_id, target.type, target.ref, _iso(self.clock())),
            )
            return self.get_announcement(cur.lastrowid)

    def get_announcement(self, news_id: int) -> Announcement:
        row = self._conn().execute(
            "SELECT * FROM news WHERE newsid = ?", (news_id,)
        ).fetchone()
        if row is None:
            raise NotFound("announcement", news_id)
        return self._announcement_from_row(row)

    def list_announcements_for(
        self, viewer: User, limit: int = 50, offset: int = 0
    ) -> list[Announcement]:
        """Announcements whose target matches the viewer: everyone, their
        role, a seminar they belong to (enrolled, or its tutor), or them
        personally."""
        rows = self._conn().execute(
            """SELECT n.* FROM news n
               WHERE n.targettype = 'everyone'
                  OR (n.targettype = 'role' AND n.targetid = ?)
                  OR (n.targettype = 'user' AND n.targetid = ?)
                  OR (n.targettype = 'seminar' AND (
                        EXISTS (SELECT 1 FROM usersseminars us
                                WHERE us.semid = n.targetid AND us.userid = ?)
                     OR EXISTS (SELECT 1 FROM seminars s
                                WHERE s.semid = n.targetid AND s.tutorid = ?)))
               ORDER BY n.newsid DESC LIMIT ? OFFSET ?""",
            (viewer.access_level.value, viewer.user_id, viewer.user_id, viewer.user_id,
             limit, offset),
        ).fetchall()
        return [self._announcement_from_row(r) for r in rows]

    def announcement_recipients(self, announcement: Announcement) -> list[User]:
        """Resolve the fan-out set. The sender never mails themselves;
        seminar targets reach the enrolled students plus the tutor."""
        target = announcement.target
        if target.type == TargetType.EVERYONE:
            rows = self._conn().execute(
                "SELECT * FROM users WHERE active = 1 ORDER BY userid"
            ).fetchall()
        elif target.type == TargetType.ROLE:
            rows = self._conn().execute(
                "SELECT * FROM users WHERE active = 1 AND accesslevel = ? ORDER BY userid",
                (target.ref,),
            ).fetchall()
        elif target.type == TargetType.SEMINAR:
            rows = self._conn().execute(
                """SELECT u.* FROM users u
                   WHERE u.active = 1 AND (
                         u.userid IN (SELECT userid FROM usersseminars WHERE semid = ?)
                      OR u.userid IN (SELECT tutorid FROM seminars WHERE semid = ?))
                   ORDER BY u.userid""",
                (target.ref, target.ref),
            ).fetchall()
        else:
            rows = self._conn().execute(
                "SELECT * FROM users WHERE active = 1 AND userid = ?", (target.ref,)
            ).fetchall()
        return [
            self._user_from_row(r) for r in rows
            if r["userid"] != announcement.sender_id
        ]

    # -- material files ----------------------------------------------------------

    def _material_from_row(self, row: sqlite3.Row) -> MaterialFile:
        return MaterialFile(
            file_id=row["fileid"],
            seminar_id=row["semid"],
            uploader_id=row["uploaderid"],
            name=row["name"],
            media_type=row["mediatype"],
            size_bytes=row["sizebytes"],
            content_hash=row["contenthash"],
            uploaded_at=_parse_dt(row["uploadedat"]),
        )

    def store_material(
        self,
        seminar_id: int,
        uploader_id: int,
        name: str,
        media_type: str,
        data: bytes,
        max_bytes: Optional[int] = None,
    ) -> MaterialFile:
        if self.blobs is None:
            raise StoreError("no blob directory configured")
        if not data:
            raise EmptyUpload("refusing a zero-byte upload")
        if max_bytes is not None and len(data) > max_bytes:
            raise UploadTooLarge(f"{len(data)} bytes exceeds the {max_bytes} byte limit")
        digest = self.blobs.put(data)
        with self.transaction(write=True) as conn:
            self.get_seminar(seminar_id)
            self.get_user(uploader_id)
            cur = conn.execute(
                """INSERT INTO files (semid, uploaderid, name, mediatype, sizebytes,
                     contenthash, uploadedat)
                   VALUES (?, ?, ?, ?, ?, ?, ?)""",
                (seminar_id, uploader_id, name, media_type, len(data), digest,
                 _iso(self.clock())),
            )
            return self.get_material(cur.lastrowid)

    def get_material(self, file_id: int) -> MaterialFile:
        row = self._conn().execute(
            "SELECT * FROM files WHERE fileid = ?", (file_id,)
        ).fetchone()
        if row is None:
            raise NotFound("material file", file_id)
        return self._material_from_row(row)

    def list_materials(self, seminar_id: int) -> list[MaterialFile]:
        self.get_seminar(seminar_id)
        rows = self._conn().execute(
            "SELECT * FROM files WHERE semid = ? ORDER BY fileid", (seminar_id,)
        ).fetchall()
        return [self._material_from_row(r) for r in rows]

    def open_material(self, file_id: int) -> bytes:
        material = self.get_material(file_id)
        return self.blobs.get(material.content_hash)

    def material_recipients(self, material: MaterialFile) -> list[User]:
        """Students enrolled in the material's seminar."""
        rows = self._conn().execute(
            """SELECT u.* FROM users u
               JOIN usersseminars us ON us.userid = u.userid
               WHERE us.semid = ? AND u.active = 1 AND u.accesslevel = 2
               ORDER BY u.userid""",
            (material.seminar_id,),
        ).fetchall()
        return [self._user_from_row(r) for r in rows]

    # -- outbox / delivery ledger --------------------------------------------------

    def enqueue_outbox(self, kind: str, ref_id: int) -> OutboxJob:
        now = self.clock()
        with self.transaction(write=True) as conn:
            cur = conn.execute(
                """INSERT INTO outbox (kind, refid, status, attempts, nextattemptat, createdat)
                   VALUES (?, ?, 'pending', 0, ?, ?)""",
                (kind, ref_id, _iso(now), _iso(now)),
            )
            row = conn.execute(
                "SELECT * FROM outbox WHERE jobid = ?", (cur.lastrowid,)
            ).fetchone()
        return self._job_from_row(row)

    def _job_from_row(self, row: sqlite3.Row) -> OutboxJob:
        return OutboxJob(
            job_id=row["jobid"],
            kind=row["kind"],
            ref_id=row["refid"],
            status=row["status"],
            attempts=row["attempts"],
            next_attempt_at=_parse_dt(row["nextattemptat"]),
            last_error=row["lasterror"],
            created_at=_parse_dt(row["createdat"]),
        )

    def due_outbox_jobs(self, now: Optional[datetime] = None) -> list[OutboxJob]:
        now = now or self.clock()
        rows = self._conn().execute(
            "SELECT * FROM outbox WHERE status = 'pending' AND nextattemptat <= ? ORDER BY jobid",
            (_iso(now),),
        ).fetchall()
        return [self._job_from_row(r) for r in rows]

    def settle_outbox_job(
        self,
        job_id: int,
        status: str,
        attempts: int,
        next_attempt_at: Optional[datetime] = None,
        last_error: Optional[str] = None,
    ) -> None:
        with self.transaction(write=True) as conn:
            conn.execute(
                """UPDATE outbox SET status = ?, attempts = ?, nextattemptat = ?, lasterror = ?
                   WHERE jobid = ?""",
                (
                    status,
                    attempts,
                    _iso(next_attempt_at or self.clock()),
                    last_error,
                    job_id,
                ),
            )

    def claim_delivery(self, kind: str, ref_id: int, recipient: str) -> bool:
        """Record intent to send; False when this (recipient, message) pair
        was already claimed. Committed before the send so a crash can only
        lose a message, never duplicate one."""
        try:
            with self.transaction(write=True) as conn:
                conn.execute(
                    "INSERT INTO maildeliveries (kind, refid, recipient, sentat) VALUES (?, ?, ?, ?)",
                    (kind, ref_id, recipient, _iso(self.clock())),
                )
            return True
        except sqlite3.IntegrityError:
            return False

    def release_delivery(self, kind: str, ref_id: int, recipient: str) -> None:
        """Undo a claim after a synchronous send failure so a retry may
        attempt that recipient again."""
        with self.transaction(write=True) as conn:
            conn.execute(
                "DELETE FROM maildeliveries WHERE kind = ? AND refid = ? AND recipient = ?",
                (kind, ref_id, recipient),
            )

    def delivery_count(self, kind: str, ref_id: int) -> int:
        return self._conn().execute(
            "SELECT COUNT(*) AS n FROM maildeliveries WHERE kind = ? AND refid = ?",
            (kind, ref_id),
        ).fetchone()["n"]

    def dead_letters(self) -> list[OutboxJob]:
        rows = self._conn().execute(
            "SELECT * FROM outbox WHERE status = 'dead' ORDER BY jobid"
        ).fetchall()
        return [self._job_from_row(r) for r in rows]

    # -- logical export / import ------------------------------------------------

    def export_text(self) -> str:
        """Deterministic line-delimited dump: header, then one JSON array
        per row, tables in schema order, rows sorted by key."""
        lines = [_EXPORT_HEADER]
        with self.transaction() as conn:
            for table, columns, keys in _EXPORT_TABLES:
                rows = conn.execute(
                    f"SELECT {', '.join(columns)} FROM {table} ORDER BY {', '.join(keys)}"
                ).fetchall()
                for row in rows:
                    payload = json.dumps(list(row), ensure_ascii=True, separators=(",", ":"))
                    lines.append(f"{table}\t{payload}")
        return "\n".join(lines) + "\n"

    def import_text(self, text: str) -> None:
        """Load a logical export into an empty database."""
        lines = text.splitlines()
        if not lines or lines[0] != _EXPORT_HEADER:
            raise StoreError("not a recognized export file")
        known = {t: cols for t, cols, _ in _EXPORT_TABLES}
        with self.transaction(write=True) as conn:
            for table, _, _ in _EXPORT_TABLES:
                if conn.execute(f"SELECT 1 FROM {table} LIMIT 1").fetchone():
                    raise StoreError("import target database is not empty")
            for lineno, line in enumerate(lines[1:], start=2):
                if not line.strip():
                    continue
                table, _, payload = line.partition("\t")
                if table not in known:
                    raise StoreError(f"line {lineno}: unknown table {table!r}")
                values = json.loads(payload)
                cols = known[table]
                if len(values) != len(cols):
                    raise StoreError(f"line {lineno}: expected {len(cols)} fields")
                conn.execute(
                    f"INSERT INTO {table} ({', '.join(cols)}) "
                    f"VALUES ({', '.join('?' * len(cols))})",
                    values,
                )


def _coerce_date(value) -> date:
    if isinstance(value, date):
        return value
    return date.fromisoformat(value)
