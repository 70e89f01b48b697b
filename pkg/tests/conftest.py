from datetime import date
from fractions import Fraction

import pytest

from esem.core import SeminarDraft, UserDraft
from esem.db import Database

# keep password hashing cheap in tests
FAST_ITERS = 500


@pytest.fixture
def db(tmp_path):
    path = tmp_path / "esem.db"
    Database.init_schema(path)
    database = Database(path, blob_dir=tmp_path / "blobs", hash_iterations=FAST_ITERS)
    yield database
    database.close()


def make_user(db, username, level, email=None, password="pw123456", **extra):
    fields = dict(
        username=username,
        password=password,
        access_level=level,
        first_name=username.capitalize(),
        last_name="Person",
        email=email or f"{username}@example.org",
    )
    fields.update(extra)
    return db.create_user(UserDraft(**fields))


def make_seminar(db, tutor_id, title="Intro", capacity=10, hours=10,
                 threshold=Fraction(4, 5), **extra):
    draft = SeminarDraft(
        title=title,
        description=extra.pop("description", ""),
        tutor_id=tutor_id,
        max_participants=capacity,
        total_hours=hours,
        start_date=extra.pop("start_date", date(2026, 9, 1)),
        end_date=extra.pop("end_date", date(2026, 9, 30)),
        completion_threshold=threshold,
    )
    return db.create_seminar(draft)
