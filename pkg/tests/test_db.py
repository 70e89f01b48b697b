import random
import sqlite3
import threading
from concurrent.futures import ThreadPoolExecutor
from datetime import date
from fractions import Fraction

import pytest

from esem.core import AccessLevel, SeminarDraft, SeminarState, determine_completion
from esem.db import (
    AlreadyEnrolled,
    AlreadyFinalized,
    CapacityFull,
    Database,
    DuplicateEmail,
    DuplicateUsername,
    EmptyUpload,
    HasDependents,
    HourOutOfRange,
    NotEnrolled,
    NotFound,
    SchemaVersionMismatch,
    SeminarNotOpen,
    StoreError,
    Target,
    TitleCollision,
    UploadTooLarge,
    ValidationFailed,
)

from conftest import make_seminar, make_user


class TestUsers:
    def test_create_and_fetch(self, db):
        user = make_user(db, "alice", 2)
        assert user.access_level is AccessLevel.STUDENT
        assert db.get_user(user.user_id).username == "alice"

    def test_password_is_hashed(self, db):
        user = make_user(db, "alice", 2, password="hunter22")
        assert user.password_hash
        assert user.password_hash != "hunter22"
        assert "hunter22" not in user.password_hash

    def test_duplicate_username(self, db):
        make_user(db, "alice", 2)
        with pytest.raises(DuplicateUsername):
            make_user(db, "alice", 2, email="other@example.org")

    def test_duplicate_email(self, db):
        make_user(db, "alice", 2, email="a@example.org")
        with pytest.raises(DuplicateEmail):
            make_user(db, "bob", 2, email="a@example.org")

    def test_invalid_draft_reports_issues(self, db):
        with pytest.raises(ValidationFailed) as exc:
            make_user(db, "x", 2, email="nope")
        fields = {i.field for i in exc.value.issues}
        assert fields == {"username", "email"}

    def test_login_roundtrip(self, db):
        user = make_user(db, "alice", 2, password="s3cret!!")
        assert db.verify_login("alice", "s3cret!!").user_id == user.user_id
        assert db.verify_login("alice", "wrong") is None
        assert db.verify_login("nobody", "s3cret!!") is None
        assert db.get_user(user.user_id).last_login_at is not None

    def test_inactive_cannot_login(self, db):
        make_user(db, "alice", 2, password="s3cret!!")
        user = db.get_user_by_username("alice")
        db.update_user(user.user_id, {"active": False})
        assert db.verify_login("alice", "s3cret!!") is None

    def test_update_profile(self, db):
        user = make_user(db, "alice", 2)
        updated = db.update_user(user.user_id, {"city": "Kozani", "phone": "123"})
        assert updated.city == "Kozani"
        assert updated.phone == "123"

    def test_update_rejects_unknown_field(self, db):
        user = make_user(db, "alice", 2)
        with pytest.raises(ValidationFailed):
            db.update_user(user.user_id, {"access_level": 0})

    def test_delete_plain_user(self, db):
        user = make_user(db, "alice", 2)
        db.delete_user(user.user_id)
        with pytest.raises(NotFound):
            db.get_user(user.user_id)

    def test_delete_enrolled_needs_cascade(self, db):
        tutor = make_user(db, "tutor", 1)
        student = make_user(db, "stud", 2)
        sem = make_seminar(db, tutor.user_id)
        db.enroll_atomic(sem.seminar_id, student.user_id)
        with pytest.raises(HasDependents):
            db.delete_user(student.user_id)
        db.delete_user(student.user_id, cascade=True)
        assert db.enrolled_count(sem.seminar_id) == 0


class TestSeminars:
    def test_create(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, title="Webcraft", capacity=5, hours=8)
        assert sem.state is SeminarState.OPEN
        assert sem.completion_threshold == Fraction(4, 5)

    def test_validation_collects_all_errors(self, db):
        tutor = make_user(db, "tutor", 1)
        draft = SeminarDraft(
            title="",
            tutor_id=tutor.user_id,
            max_participants=0,
            total_hours=0,
            start_date=date(2026, 9, 2),
            end_date=date(2026, 9, 1),
        )
        with pytest.raises(ValidationFailed) as exc:
            db.create_seminar(draft)
        assert len(exc.value.issues) == 4

    def test_tutor_must_be_tutor(self, db):
        student = make_user(db, "stud", 2)
        draft = SeminarDraft(
            title="X",
            tutor_id=student.user_id,
            max_participants=5,
            total_hours=5,
            start_date=date(2026, 9, 1),
            end_date=date(2026, 9, 2),
        )
        with pytest.raises(ValidationFailed):
            db.create_seminar(draft)

    def test_list_with_live_counts(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, capacity=5)
        for i in range(2):
            student = make_user(db, f"stu{i}", 2)
            db.enroll_atomic(sem.seminar_id, student.user_id)
        [(listed, count)] = db.list_seminars(only_open=True)
        assert listed.seminar_id == sem.seminar_id
        assert count == 2

    def test_state_transitions_are_monotone(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        db.update_seminar(sem.seminar_id, {"state": "in_progress"})
        with pytest.raises(ValidationFailed):
            db.update_seminar(sem.seminar_id, {"state": "open"})
        db.update_seminar(sem.seminar_id, {"state": "finalized"})
        with pytest.raises(AlreadyFinalized):
            db.update_seminar(sem.seminar_id, {"title": "New"})

    def test_capacity_cannot_drop_below_enrolled(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, capacity=5)
        for i in range(3):
            db.enroll_atomic(sem.seminar_id, make_user(db, f"stu{i}", 2).user_id)
        with pytest.raises(ValidationFailed):
            db.update_seminar(sem.seminar_id, {"max_participants": 2})
        db.update_seminar(sem.seminar_id, {"max_participants": 3})

    def test_delete_with_enrollments_needs_cascade(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        db.enroll_atomic(sem.seminar_id, make_user(db, "stu0", 2).user_id)
        with pytest.raises(HasDependents):
            db.delete_seminar(sem.seminar_id)
        db.delete_seminar(sem.seminar_id, cascade=True)
        with pytest.raises(NotFound):
            db.get_seminar(sem.seminar_id)

    def test_cascade_leaves_no_dangling_references(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, hours=2, threshold=Fraction(1, 2))
        student = make_user(db, "stu0", 2)
        db.enroll_atomic(sem.seminar_id, student.user_id)
        db.record_presence(sem.seminar_id, student.user_id, 1, True)
        db.store_material(sem.seminar_id, tutor.user_id, "n.pdf", "application/pdf", b"abc")
        db.create_announcement("hi", "", tutor.user_id, Target("seminar", sem.seminar_id))
        db.finalize_seminar(sem.seminar_id)
        db.delete_seminar(sem.seminar_id, cascade=True)
        conn = sqlite3.connect(db.path)
        assert conn.execute("PRAGMA foreign_key_check").fetchall() == []
        for table in ("usersseminars", "attendancebook", "presenthours", "history", "files"):
            assert conn.execute(f"SELECT COUNT(*) FROM {table}").fetchone()[0] == 0
        conn.close()


class TestEnrollment:
    def test_single_enroll(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, capacity=1)
        student = make_user(db, "stu0", 2)
        enrollment = db.enroll_atomic(sem.seminar_id, student.user_id)
        assert enrollment.seminar_id == sem.seminar_id
        assert db.enrolled_count(sem.seminar_id) == 1

    def test_duplicate_enroll_rejected_without_change(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        student = make_user(db, "stu0", 2)
        db.enroll_atomic(sem.seminar_id, student.user_id)
        with pytest.raises(AlreadyEnrolled):
            db.enroll_atomic(sem.seminar_id, student.user_id)
        assert db.enrolled_count(sem.seminar_id) == 1

    def test_capacity_refusal(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, capacity=2)
        for i in range(2):
            db.enroll_atomic(sem.seminar_id, make_user(db, f"stu{i}", 2).user_id)
        late = make_user(db, "late", 2)
        with pytest.raises(CapacityFull):
            db.enroll_atomic(sem.seminar_id, late.user_id)

    def test_only_open_seminars_accept(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        db.update_seminar(sem.seminar_id, {"state": "in_progress"})
        with pytest.raises(SeminarNotOpen):
            db.enroll_atomic(sem.seminar_id, make_user(db, "stu0", 2).user_id)

    def test_tutor_cannot_enroll(self, db):
        tutor = make_user(db, "tutor", 1)
        other = make_user(db, "other", 1)
        sem = make_seminar(db, tutor.user_id)
        with pytest.raises(ValidationFailed):
            db.enroll_atomic(sem.seminar_id, other.user_id)

    def test_concurrent_enrollment_never_oversells(self, db):
        # 100 threads race for 10 seats; the transaction must keep the
        # final count at exactly 10 with 90 capacity refusals.
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, capacity=10)
        students = [make_user(db, f"stu{i:03d}", 2) for i in range(100)]
        results = []
        lock = threading.Lock()

        def attempt(student):
            try:
                db.enroll_atomic(sem.seminar_id, student.user_id)
                outcome = "ok"
            except CapacityFull:
                outcome = "full"
            with lock:
                results.append(outcome)

        with ThreadPoolExecutor(max_workers=32) as pool:
            list(pool.map(attempt, students))
        assert results.count("ok") == 10
        assert results.count("full") == 90
        assert db.enrolled_count(sem.seminar_id) == 10

    def test_unenroll_only_while_open(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        student = make_user(db, "stu0", 2)
        db.enroll_atomic(sem.seminar_id, student.user_id)
        db.update_seminar(sem.seminar_id, {"state": "in_progress"})
        with pytest.raises(SeminarNotOpen):
            db.unenroll(sem.seminar_id, student.user_id)
        # a tutor removing a participant may do so until finalization
        db.unenroll(sem.seminar_id, student.user_id, allow_in_progress=True)
        assert db.enrolled_count(sem.seminar_id) == 0

    def test_unenroll_requires_enrollment(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        with pytest.raises(NotEnrolled):
            db.unenroll(sem.seminar_id, make_user(db, "stu0", 2).user_id)


def _recomputed_summary(db, seminar_id, user_id):
    present = sum(1 for e in db.list_presence(seminar_id, user_id) if e.present)
    absent = sum(1 for e in db.list_presence(seminar_id, user_id) if not e.present)
    return present, absent


class TestAttendance:
    def _setup(self, db, hours=3):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, hours=hours)
        student = make_user(db, "stu0", 2)
        db.enroll_atomic(sem.seminar_id, student.user_id)
        return sem, student

    def test_correction_overwrites(self, db):
        sem, student = self._setup(db)
        db.record_presence(sem.seminar_id, student.user_id, 1, True)
        db.record_presence(sem.seminar_id, student.user_id, 1, False)
        entries = db.list_presence(sem.seminar_id, student.user_id)
        assert len(entries) == 1
        assert entries[0].present is False
        summary = db.get_summary(sem.seminar_id, student.user_id)
        assert (summary.present_count, summary.absent_count) == (0, 1)

    def test_hour_zero_out_of_range(self, db):
        sem, student = self._setup(db)
        with pytest.raises(HourOutOfRange):
            db.record_presence(sem.seminar_id, student.user_id, 0, True)

    def test_hour_above_total_out_of_range(self, db):
        sem, student = self._setup(db, hours=3)
        with pytest.raises(HourOutOfRange):
            db.record_presence(sem.seminar_id, student.user_id, 4, True)

    def test_all_hours_present(self, db):
        sem, student = self._setup(db, hours=3)
        for h in (1, 2, 3):
            db.record_presence(sem.seminar_id, student.user_id, h, True)
        summary = db.get_summary(sem.seminar_id, student.user_id)
        assert summary.present_count == 3

    def test_requires_enrollment(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        stranger = make_user(db, "xst0", 2)
        with pytest.raises(NotEnrolled):
            db.record_presence(sem.seminar_id, stranger.user_id, 1, True)

    def test_finalized_seminar_is_immutable(self, db):
        sem, student = self._setup(db)
        db.finalize_seminar(sem.seminar_id)
        with pytest.raises(AlreadyFinalized):
            db.record_presence(sem.seminar_id, student.user_id, 1, True)

    def test_aggregates_match_recomputation_after_random_workload(self, db):
        # 1000 random upserts, then every aggregate must equal a
        # from-scratch recount of the entries.
        rng = random.Random(20260809)
        tutor = make_user(db, "tutor", 1)
        hours = 12
        seminars = [make_seminar(db, tutor.user_id, title=f"S{i}", hours=hours,
                                 capacity=10) for i in range(3)]
        students = [make_user(db, f"stu{i}", 2) for i in range(8)]
        pairs = []
        for sem in seminars:
            for student in rng.sample(students, 5):
                db.enroll_atomic(sem.seminar_id, student.user_id)
                pairs.append((sem.seminar_id, student.user_id))
        for _ in range(1000):
            sem_id, user_id = rng.choice(pairs)
            db.record_presence(sem_id, user_id, rng.randint(1, hours), rng.random() < 0.5)
        for sem_id, user_id in pairs:
            summary = db.get_summary(sem_id, user_id)
            assert (summary.present_count, summary.absent_count) == (
                _recomputed_summary(db, sem_id, user_id)
            )


class TestFinalization:
    def test_threshold_rule(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, hours=10, threshold=Fraction(4, 5))
        a = make_user(db, "stua", 2)
        b = make_user(db, "stub", 2)
        for student, present in ((a, 8), (b, 7)):
            db.enroll_atomic(sem.seminar_id, student.user_id)
            for h in range(1, present + 1):
                db.record_presence(sem.seminar_id, student.user_id, h, True)
        records = db.finalize_seminar(sem.seminar_id)
        assert [r.user_id for r in records] == [a.user_id]
        assert db.get_seminar(sem.seminar_id).state is SeminarState.FINALIZED

    def test_success_mark_overrides_failing_ratio(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, hours=10, threshold=Fraction(4, 5))
        b = make_user(db, "stub", 2)
        db.enroll_atomic(sem.seminar_id, b.user_id)
        for h in range(1, 8):
            db.record_presence(sem.seminar_id, b.user_id, h, True)
        db.set_success_mark(sem.seminar_id, b.user_id, True)
        records = db.finalize_seminar(sem.seminar_id)
        assert [r.user_id for r in records] == [b.user_id]

    def test_success_mark_overrides_passing_ratio(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, hours=4, threshold=Fraction(1, 2))
        a = make_user(db, "stua", 2)
        db.enroll_atomic(sem.seminar_id, a.user_id)
        for h in range(1, 5):
            db.record_presence(sem.seminar_id, a.user_id, h, True)
        db.set_success_mark(sem.seminar_id, a.user_id, False)
        assert db.finalize_seminar(sem.seminar_id) == []

    def test_unmarked_hours_count_as_absent(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, hours=10, threshold=Fraction(4, 5))
        a = make_user(db, "stua", 2)
        db.enroll_atomic(sem.seminar_id, a.user_id)
        for h in range(1, 9):  # 8 of 10 marked present, 2 never marked
            db.record_presence(sem.seminar_id, a.user_id, h, True)
        assert len(db.finalize_seminar(sem.seminar_id)) == 1

    def test_finalize_twice_rejected(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        db.finalize_seminar(sem.seminar_id)
        with pytest.raises(AlreadyFinalized):
            db.finalize_seminar(sem.seminar_id)

    def test_title_collision_surfaces(self, db):
        tutor = make_user(db, "tutor", 1)
        student = make_user(db, "stua", 2)
        first = make_seminar(db, tutor.user_id, title="Same", hours=1,
                             threshold=Fraction(1, 2))
        db.enroll_atomic(first.seminar_id, student.user_id)
        db.record_presence(first.seminar_id, student.user_id, 1, True)
        db.finalize_seminar(first.seminar_id)
        second = make_seminar(db, tutor.user_id, title="Same", hours=1,
                              threshold=Fraction(1, 2))
        db.enroll_atomic(second.seminar_id, student.user_id)
        db.record_presence(second.seminar_id, student.user_id, 1, True)
        with pytest.raises(TitleCollision):
            db.finalize_seminar(second.seminar_id)
        # rejection rolled the whole finalization back
        assert db.get_seminar(second.seminar_id).state is SeminarState.OPEN
        assert len(db.participation_history(student.user_id)) == 1

    def test_randomized_fixture_matches_independent_recomputation(self, db):
        # Oracle: success per participant re-derived here from the raw
        # presence entries and override marks, then compared with the
        # records finalize produced.
        rng = random.Random(42)
        tutor = make_user(db, "tutor", 1)
        students = [make_user(db, f"stu{i}", 2) for i in range(8)]
        expected = {}
        seminars = []
        for i in range(5):
            hours = rng.randint(4, 12)
            sem = make_seminar(db, tutor.user_id, title=f"Course {i}", hours=hours,
                               capacity=10, threshold=Fraction(4, 5))
            seminars.append(sem)
            for student in students:
                db.enroll_atomic(sem.seminar_id, student.user_id)
                for hour in range(1, hours + 1):
                    if rng.random() < 0.7:
                        db.record_presence(sem.seminar_id, student.user_id, hour,
                                           rng.random() < 0.8)
                if rng.random() < 0.15:
                    db.set_success_mark(sem.seminar_id, student.user_id,
                                        rng.random() < 0.5)
        for sem in seminars:
            for student in students:
                marks = db.list_presence(sem.seminar_id, student.user_id)
                present = sum(1 for e in marks if e.present)
                override = db.get_summary(sem.seminar_id, student.user_id).success_mark
                if override is not None:
                    expected[(sem.seminar_id, student.user_id)] = override
                else:
                    expected[(sem.seminar_id, student.user_id)] = determine_completion(
                        present, sem.total_hours, Fraction(4, 5)
                    )
        for sem in seminars:
            got = {r.user_id for r in db.finalize_seminar(sem.seminar_id)}
            want = {uid for (sid, uid), ok in expected.items()
                    if sid == sem.seminar_id and ok}
            assert got == want


class TestAnnouncements:
    def test_target_matching_brute_force(self, db):
        # Every announcement/viewer pair checked against a plain-Python
        # re-derivation of the matching rule.
        admin = make_user(db, "admin", 0)
        tutors = [make_user(db, f"tut{i}", 1) for i in range(2)]
        students = [make_user(db, f"stu{i}", 2) for i in range(4)]
        sems = [make_seminar(db, tutors[i].user_id, title=f"S{i}") for i in range(2)]
        enrolled = {
            (sems[0].seminar_id, students[0].user_id),
            (sems[0].seminar_id, students[1].user_id),
            (sems[1].seminar_id, students[1].user_id),
            (sems[1].seminar_id, students[2].user_id),
        }
        for sem_id, uid in sorted(enrolled):
            db.enroll_atomic(sem_id, uid)
        posted = [
            db.create_announcement("all", "", admin.user_id, Target("everyone")),
            db.create_announcement("tutors", "", admin.user_id, Target("role", 1)),
            db.create_announcement("students", "", admin.user_id, Target("role", 2)),
            db.create_announcement("sem0", "", tutors[0].user_id,
                                   Target("seminar", sems[0].seminar_id)),
            db.create_announcement("sem1", "", tutors[1].user_id,
                                   Target("seminar", sems[1].seminar_id)),
            db.create_announcement("direct", "", admin.user_id,
                                   Target("user", students[3].user_id)),
        ]
        everyone = [admin] + tutors + students

        def matches(ann, viewer):
            t = ann.target
            if t.type == "everyone":
                return True
            if t.type == "role":
                return viewer.access_level.value == t.ref
            if t.type == "user":
                return viewer.user_id == t.ref
            if (t.ref, viewer.user_id) in enrolled:
                return True
            return db.get_seminar(t.ref).tutor_id == viewer.user_id

        for viewer in everyone:
            visible = {a.news_id for a in db.list_announcements_for(viewer)}
            expect = {a.news_id for a in posted if matches(a, viewer)}
            assert visible == expect, viewer.username

    def test_spec_visibility_example(self, db):
        admin = make_user(db, "admin", 0)
        tutor = make_user(db, "tutor", 1)
        student = make_user(db, "stud", 2)
        sem = make_seminar(db, tutor.user_id)
        db.enroll_atomic(sem.seminar_id, student.user_id)
        for_sem = db.create_announcement("s", "", tutor.user_id,
                                         Target("seminar", sem.seminar_id))
        for_all = db.create_announcement("a", "", admin.user_id, Target("everyone"))
        for_tutors = db.create_announcement("t", "", admin.user_id, Target("role", 1))
        seen = {a.news_id for a in db.list_announcements_for(db.get_user(student.user_id))}
        assert for_sem.news_id in seen
        assert for_all.news_id in seen
        assert for_tutors.news_id not in seen

    def test_target_must_resolve(self, db):
        admin = make_user(db, "admin", 0)
        with pytest.raises(NotFound):
            db.create_announcement("x", "", admin.user_id, Target("seminar", 999))
        with pytest.raises(NotFound):
            db.create_announcement("x", "", admin.user_id, Target("user", 999))

    def test_recipient_resolution(self, db):
        admin = make_user(db, "admin", 0)
        tutor = make_user(db, "tutor", 1)
        students = [make_user(db, f"stu{i}", 2) for i in range(3)]
        sem = make_seminar(db, tutor.user_id)
        for s in students:
            db.enroll_atomic(sem.seminar_id, s.user_id)
        ann = db.create_announcement("x", "", tutor.user_id,
                                     Target("seminar", sem.seminar_id))
        recipients = {u.user_id for u in db.announcement_recipients(ann)}
        # three students; the tutor is the sender and is excluded
        assert recipients == {s.user_id for s in students}
        ann2 = db.create_announcement("y", "", admin.user_id,
                                      Target("seminar", sem.seminar_id))
        recipients2 = {u.user_id for u in db.announcement_recipients(ann2)}
        assert recipients2 == {s.user_id for s in students} | {tutor.user_id}

    def test_everyone_excludes_sender(self, db):
        admin = make_user(db, "admin", 0)
        ann = db.create_announcement("x", "", admin.user_id, Target("everyone"))
        assert db.announcement_recipients(ann) == []


class TestMaterials:
    def test_size_equals_content_length(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        material = db.store_material(
            sem.seminar_id, tutor.user_id, "notes.pdf", "application/pdf", b"abc"
        )
        assert material.size_bytes == 3
        import hashlib
        assert material.content_hash == hashlib.sha256(b"abc").hexdigest()
        assert db.open_material(material.file_id) == b"abc"

    def test_same_bytes_two_names_one_blob(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        db.store_material(sem.seminar_id, tutor.user_id, "a.txt", "text/plain", b"dup")
        db.store_material(sem.seminar_id, tutor.user_id, "b.txt", "text/plain", b"dup")
        assert len(db.list_materials(sem.seminar_id)) == 2
        assert db.blobs.count() == 1

    def test_zero_byte_rejected(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        with pytest.raises(EmptyUpload):
            db.store_material(sem.seminar_id, tutor.user_id, "e", "text/plain", b"")

    def test_size_limit(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        with pytest.raises(UploadTooLarge):
            db.store_material(sem.seminar_id, tutor.user_id, "big", "x", b"12345",
                              max_bytes=4)

    def test_blob_layout(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        m = db.store_material(sem.seminar_id, tutor.user_id, "n", "t", b"xyz")
        path = db.blobs.path_for(m.content_hash)
        assert path.parent.name == m.content_hash[:2]
        assert path.name == m.content_hash
        assert path.is_file()

    def test_material_recipients_are_enrolled_students(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id)
        s0 = make_user(db, "stu0", 2)
        s1 = make_user(db, "stu1", 2)
        make_user(db, "stu2", 2)  # not enrolled
        db.enroll_atomic(sem.seminar_id, s0.user_id)
        db.enroll_atomic(sem.seminar_id, s1.user_id)
        m = db.store_material(sem.seminar_id, tutor.user_id, "n", "t", b"x")
        assert {u.user_id for u in db.material_recipients(m)} == {s0.user_id, s1.user_id}


class TestHistoryQueries:
    def test_empty_history(self, db):
        user = make_user(db, "stu0", 2)
        assert db.participation_history(user.user_id) == []

    def test_completion_lookup(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, hours=1, threshold=Fraction(1, 2))
        student = make_user(db, "stu0", 2)
        db.enroll_atomic(sem.seminar_id, student.user_id)
        db.record_presence(sem.seminar_id, student.user_id, 1, True)
        [record] = db.finalize_seminar(sem.seminar_id)
        assert db.get_completion(student.user_id, sem.seminar_id) == record
        assert db.get_completion(tutor.user_id, sem.seminar_id) is None


class TestExportImport:
    def _populate(self, db):
        tutor = make_user(db, "tutor", 1)
        sem = make_seminar(db, tutor.user_id, hours=2, threshold=Fraction(1, 2))
        student = make_user(db, "stu0", 2)
        db.enroll_atomic(sem.seminar_id, student.user_id)
        db.record_presence(sem.seminar_id, student.user_id, 1, True)
        db.create_announcement("hello", "world", tutor.user_id,
                               Target("seminar", sem.seminar_id))
        db.store_material(sem.seminar_id, tutor.user_id, "n.txt", "text/plain", b"data")
        db.finalize_seminar(sem.seminar_id)

    def test_export_is_deterministic(self, db):
        self._populate(db)
        assert db.export_text() == db.export_text()

    def test_survives_restart_byte_identical(self, db, tmp_path):
        self._populate(db)
        before = db.export_text()
        db.close()
        reopened = Database(db.path, blob_dir=tmp_path / "blobs", hash_iterations=500)
        try:
            assert reopened.export_text() == before
        finally:
            reopened.close()

    def test_roundtrip_identity(self, db, tmp_path):
        self._populate(db)
        exported = db.export_text()
        other_path = tmp_path / "copy.db"
        Database.init_schema(other_path)
        other = Database(other_path, hash_iterations=500)
        try:
            other.import_text(exported)
            assert other.export_text() == exported
        finally:
            other.close()

    def test_import_refuses_nonempty(self, db):
        self._populate(db)
        exported = db.export_text()
        with pytest.raises(StoreError):
            db.import_text(exported)

    def test_import_refuses_garbage(self, db):
        with pytest.raises(StoreError):
            db.import_text("not an export\n")


class TestSchemaVersion:
    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(NotFound):
            Database(tmp_path / "absent.db")

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "old.db"
        Database.init_schema(path)
        conn = sqlite3.connect(path)
        conn.execute("UPDATE meta SET value = '999' WHERE key = 'schema_version'")
        conn.commit()
        conn.close()
        with pytest.raises(SchemaVersionMismatch):
            Database(path)
