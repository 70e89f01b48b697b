"""Domain rules for the seminar service: roles, permissions, capacity,
completion, and input validation.

Everything in this module is a pure function over immutable values; no
storage, no clock, no network.

Permission matrix (authoritative; tests parse this table):

    action                 admin  tutor  student
    -----------------------------------------------
    EnrollSelf             no     no     yes
    ViewOwnHistory         yes    no     yes
    EditOwnProfile         yes    yes    yes
    DownloadMaterial       yes    yes    yes
    ViewNews               yes    yes    yes
    PrintOwnCertificate    no     no     yes
    ManageOwnSeminars      yes    yes    no
    RecordAttendance       yes    yes    no
    MarkSuccess            yes    yes    no
    ManageOwnParticipants  yes    yes    no
    UploadMaterial         yes    yes    no
    PostSeminarNews        yes    yes    no
    ManageAnySeminar       yes    no     no
    ManageAnyParticipant   yes    no     no
    EditAnyProfile         yes    no     no
    AddTutor               yes    no     no
    PostGlobalNews         yes    no     no

Admins administer; they are not trainees, so they can neither enroll
themselves nor print certificates. Tutors act only on seminars they own;
the "Any" actions are the administrator's alone.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import date, datetime
from enum import Enum, IntEnum
from fractions import Fraction
from typing import Optional


class AccessLevel(IntEnum):
    ADMIN = 0
    TUTOR = 1
    STUDENT = 2

    @classmethod
    def parse(cls, code: int) -> "AccessLevel":
        """Accept only the codes 0, 1, 2; anything else is rejected."""
        if not isinstance(code, int) or isinstance(code, bool) or code not in (0, 1, 2):
            raise ValueError(f"invalid access level code: {code!r}")
        return cls(code)


class RoleAction(Enum):
    ENROLL_SELF = "EnrollSelf"
    VIEW_OWN_HISTORY = "ViewOwnHistory"
    EDIT_OWN_PROFILE = "EditOwnProfile"
    DOWNLOAD_MATERIAL = "DownloadMaterial"
    VIEW_NEWS = "ViewNews"
    PRINT_OWN_CERTIFICATE = "PrintOwnCertificate"
    MANAGE_OWN_SEMINARS = "ManageOwnSeminars"
    RECORD_ATTENDANCE = "RecordAttendance"
    MARK_SUCCESS = "MarkSuccess"
    MANAGE_OWN_PARTICIPANTS = "ManageOwnParticipants"
    UPLOAD_MATERIAL = "UploadMaterial"
    POST_SEMINAR_NEWS = "PostSeminarNews"
    MANAGE_ANY_SEMINAR = "ManageAnySeminar"
    MANAGE_ANY_PARTICIPANT = "ManageAnyParticipant"
    EDIT_ANY_PROFILE = "EditAnyProfile"
    ADD_TUTOR = "AddTutor"
    POST_GLOBAL_NEWS = "PostGlobalNews"


_STUDENT_ACTIONS = frozenset(
    {
        RoleAction.ENROLL_SELF,
        RoleAction.VIEW_OWN_HISTORY,
        RoleAction.EDIT_OWN_PROFILE,
        RoleAction.DOWNLOAD_MATERIAL,
        RoleAction.VIEW_NEWS,
        RoleAction.PRINT_OWN_CERTIFICATE,
    }
)

_TUTOR_ACTIONS = frozenset(
    {
        RoleAction.MANAGE_OWN_SEMINARS,
        RoleAction.RECORD_ATTENDANCE,
        RoleAction.MARK_SUCCESS,
        RoleAction.MANAGE_OWN_PARTICIPANTS,
        RoleAction.UPLOAD_MATERIAL,
        RoleAction.POST_SEMINAR_NEWS,
        RoleAction.EDIT_OWN_PROFILE,
        RoleAction.VIEW_NEWS,
        RoleAction.DOWNLOAD_MATERIAL,
    }
)

_ADMIN_ACTIONS = frozenset(RoleAction) - {
    RoleAction.ENROLL_SELF,
    RoleAction.PRINT_OWN_CERTIFICATE,
}

PERMISSIONS: dict[AccessLevel, frozenset[RoleAction]] = {
    AccessLevel.ADMIN: _ADMIN_ACTIONS,
    AccessLevel.TUTOR: _TUTOR_ACTIONS,
    AccessLevel.STUDENT: _STUDENT_ACTIONS,
}


def role_permits(level: AccessLevel, action: RoleAction) -> bool:
    """Total allow/deny function over the matrix in the module docstring."""
    return action in PERMISSIONS[level]


class CapacityDecision(Enum):
    ACCEPT = "accept"
    REFUSE = "refuse"


def capacity_decision(current_enrolled: int, max_participants: int) -> CapacityDecision:
    """Accept a new enrollment iff a seat is free.

    current_enrolled > max_participants means the store is corrupted and is
    reported as such rather than mapped to a refusal.
    """
    if max_participants < 1:
        raise ValueError("max_participants must be >= 1")
    if current_enrolled < 0:
        raise ValueError("current_enrolled must be >= 0")
    if current_enrolled > max_participants:
        raise ValueError(
            f"corrupted state: {current_enrolled} enrolled exceeds capacity {max_participants}"
        )
    if current_enrolled < max_participants:
        return CapacityDecision.ACCEPT
    return CapacityDecision.REFUSE


def determine_completion(present_hours: int, total_hours: int, threshold: Fraction) -> bool:
    """True iff present_hours/total_hours >= threshold.

    Compared by cross-multiplication on integers so the boundary case is
    exact; no floats anywhere.
    """
    if total_hours < 1:
        raise ValueError("total_hours must be >= 1")
    if present_hours < 0 or present_hours > total_hours:
        raise ValueError("present_hours must be within [0, total_hours]")
    if not (0 < threshold <= 1):
        raise ValueError("threshold must be in (0, 1]")
    return present_hours * threshold.denominator >= threshold.numerator * total_hours


def parse_threshold(raw: object) -> Fraction:
    """Parse a completion threshold from "4/5", "0.8", or an int/Fraction.

    Decimal strings convert exactly (Fraction("0.8") == 4/5). Floats are
    rejected; callers must not smuggle binary rounding into the rule.
    """
    if isinstance(raw, float):
        raise ValueError("threshold must be a string or rational, not float")
    if isinstance(raw, Fraction):
        value = raw
    elif isinstance(raw, int) and not isinstance(raw, bool):
        value = Fraction(raw)
    elif isinstance(raw, str):
        try:
            value = Fraction(raw.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"unparseable threshold: {raw!r}") from exc
    else:
        raise ValueError(f"unparseable threshold: {raw!r}")
    if not (0 < value <= 1):
        raise ValueError(f"threshold {value} outside (0, 1]")
    return value


class SeminarState(Enum):
    OPEN = "open"
    IN_PROGRESS = "in_progress"
    FINALIZED = "finalized"

    def can_transition_to(self, new: "SeminarState") -> bool:
        order = [SeminarState.OPEN, SeminarState.IN_PROGRESS, SeminarState.FINALIZED]
        return order.index(new) > order.index(self)


@dataclass(frozen=True)
class User:
    user_id: int
    username: str
    password_hash: str
    access_level: AccessLevel
    first_name: str
    last_name: str
    email: str
    phone: Optional[str] = None
    address: Optional[str] = None
    city: Optional[str] = None
    postal_code: Optional[str] = None
    date_of_birth: Optional[date] = None
    registered_at: Optional[datetime] = None
    last_login_at: Optional[datetime] = None
    active: bool = True

    @property
    def full_name(self) -> str:
        return f"{self.first_name} {self.last_name}".strip()


@dataclass(frozen=True)
class Seminar:
    seminar_id: int
    title: str
    description: str
    tutor_id: int
    max_participants: int
    total_hours: int
    start_date: date
    end_date: date
    completion_threshold: Fraction
    state: SeminarState = SeminarState.OPEN


@dataclass(frozen=True)
class ValidationIssue:
    field: str
    message: str


@dataclass
class SeminarDraft:
    title: str
    description: str = ""
    tutor_id: int = 0
    max_participants: int = 0
    total_hours: int = 0
    start_date: Optional[date] = None
    end_date: Optional[date] = None
    completion_threshold: Fraction = Fraction(4, 5)


@dataclass
class UserDraft:
    username: str
    password: str
    access_level: int
    first_name: str = ""
    last_name: str = ""
    email: str = ""
    phone: Optional[str] = None
    address: Optional[str] = None
    city: Optional[str] = None
    postal_code: Optional[str] = None
    date_of_birth: Optional[date] = None


_EMAIL_RE = re.compile(r"^[^@\s]+@[^@\s]+\.[^@\s]+$")


def validate_seminar(draft: SeminarDraft, tutor: Optional[User]) -> list[ValidationIssue]:
    """Every violated rule is reported, not just the first.

    `tutor` is the already-resolved owner account (None if the reference
    did not resolve); this module never touches storage itself.
    """
    issues: list[ValidationIssue] = []
    if not draft.title or not draft.title.strip():
        issues.append(ValidationIssue("title", "title must not be empty"))
    if draft.max_participants < 1:
        issues.append(ValidationIssue("max_participants", "capacity must be at least 1"))
    if draft.total_hours < 1:
        issues.append(ValidationIssue("total_hours", "total hours must be at least 1"))
    if draft.start_date is None or draft.end_date is None:
        issues.append(ValidationIssue("start_date", "start and end dates are required"))
    elif draft.start_date > draft.end_date:
        issues.append(ValidationIssue("end_date", "end date precedes start date"))
    if not (0 < draft.completion_threshold <= 1):
        issues.append(
            ValidationIssue("completion_threshold", "threshold must be in (0, 1]")
        )
    if tutor is None or tutor.access_level != AccessLevel.TUTOR:
        issues.append(ValidationIssue("tutor_id", "tutor reference must be an existing tutor"))
    return issues


def validate_user(draft: UserDraft) -> list[ValidationIssue]:
    """Format-level checks only; uniqueness of username/email belongs to
    the storage layer, which reports it with its own error codes."""
    issues: list[ValidationIssue] = []
    if not (3 <= len(draft.username) <= 64):
        issues.append(ValidationIssue("username", "username must be 3-64 characters"))
    if not draft.password:
        issues.append(ValidationIssue("password", "password must not be empty"))
    if not _EMAIL_RE.match(draft.email or ""):
        issues.append(ValidationIssue("email", "not a valid email address"))
    try:
        AccessLevel.parse(draft.access_level)
    except ValueError:
        issues.append(ValidationIssue("access_level", "access level must be 0, 1 or 2"))
    return issues
