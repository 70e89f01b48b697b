"""Email fan-out for announcements and uploaded material.

Posting a message enqueues exactly one outbox job (constant work, so
request latency never depends on how many recipients there are); a
background worker resolves recipients and delivers through a pluggable
gateway. Per (recipient, message) the delivery ledger is claimed and
committed before the send, which makes delivery at-most-once across
retries, replays, and restarts. Jobs that keep failing move to a
dead-letter state visible to administrators after bounded retries.

Two gateways ship with the service: a real SMTP client, and an in-process
capture sink used by every test (and by the optional inspection route).
"""

from __future__ import annotations

import logging
import smtplib
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from email.message import EmailMessage
from typing import Optional, Protocol

from .db import Announcement, Database, MaterialFile, NotFound, OutboxJob

log = logging.getLogger("esem.notifier")

KIND_ANNOUNCEMENT = "announcement"
KIND_MATERIAL = "material"


@dataclass(frozen=True)
class OutboundMessage:
    to: str
    subject: str
    body: str
    kind: str
    correlation_id: int


class MailGateway(Protocol):
    def send(self, message: OutboundMessage) -> None: ...


class CaptureGateway:
    """Collects messages in memory, in delivery order."""

    def __init__(self):
        self._lock = threading.Lock()
        self._messages: list[OutboundMessage] = []
        self.fail_next = 0  # test hook: fail this many sends

    def send(self, message: OutboundMessage) -> None:
        with self._lock:
            if self.fail_next > 0:
                self.fail_next -= 1
                raise ConnectionError("capture gateway: simulated failure")
            self._messages.append(message)

    @property
    def messages(self) -> list[OutboundMessage]:
        with self._lock:
            return list(self._messages)


class SmtpGateway:
    def __init__(self, host: str, port: int, sender: str,
                 username: str = "", password: str = ""):
        self.host = host
        self.port = port
        self.sender = sender
        self.username = username
        self.password = password

    def send(self, message: OutboundMessage) -> None:
        email = EmailMessage()
        email["From"] = self.sender
        email["To"] = message.to
        email["Subject"] = message.subject
        email.set_content(message.body)
        with smtplib.SMTP(self.host, self.port, timeout=30) as smtp:
            if self.username:
                smtp.starttls()
                smtp.login(self.username, self.password)
            smtp.send_message(email)


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    base_delay_seconds: float = 5.0

    def delay(self, attempt: int) -> float:
        """Exponential: base, 2*base, 4*base, ..."""
        return self.base_delay_seconds * (2 ** (attempt - 1))


def announcement_message(ann: Announcement, recipient_email: str) -> OutboundMessage:
    return OutboundMessage(
        to=recipient_email,
        subject=f"Announcement: {ann.title}",
        body=ann.body or ann.title,
        kind=KIND_ANNOUNCEMENT,
        correlation_id=ann.news_id,
    )


def material_message(material: MaterialFile, seminar_title: str,
                     recipient_email: str) -> OutboundMessage:
    return OutboundMessage(
        to=recipient_email,
        subject=f"New material for {seminar_title}",
        body=(
            f'The file "{material.name}" was added to the seminar '
            f'"{seminar_title}". Log in to download it.'
        ),
        kind=KIND_MATERIAL,
        correlation_id=material.file_id,
    )


class Notifier:
    def __init__(self, db: Database, gateway: MailGateway,
                 retry: RetryPolicy = RetryPolicy()):
        self.db = db
        self.gateway = gateway
        self.retry = retry
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    # -- enqueue (called on the request path; constant work) -----------------

    def announce(self, ann: Announcement) -> OutboxJob:
        return self.db.enqueue_outbox(KIND_ANNOUNCEMENT, ann.news_id)

    def material(self, material: MaterialFile) -> OutboxJob:
        return self.db.enqueue_outbox(KIND_MATERIAL, material.file_id)

    # -- delivery ----------------------------------------------------------------

    def _messages_for(self, job: OutboxJob) -> list[OutboundMessage]:
        if job.kind == KIND_ANNOUNCEMENT:
            ann = self.db.get_announcement(job.ref_id)
            return [
                announcement_message(ann, user.email)
                for user in self.db.announcement_recipients(ann)
            ]
        material = self.db.get_material(job.ref_id)
        title = self.db.get_seminar(material.seminar_id).title
        return [
            material_message(material, title, user.email)
            for user in self.db.material_recipients(material)
        ]

    def _process_job(self, job: OutboxJob, now: datetime) -> int:
        try:
            messages = self._messages_for(job)
        except NotFound:
            # referent was deleted after enqueueing; nothing left to send
            self.db.settle_outbox_job(job.job_id, "done", job.attempts, now,
                                      "referent deleted")
            return 0
        delivered = 0
        failures = 0
        last_error = None
        for message in messages:
            if not self.db.claim_delivery(job.kind, job.ref_id, message.to):
                continue  # already delivered by an earlier attempt or replay
            try:
                self.gateway.send(message)
                delivered += 1
            except Exception as exc:
                self.db.release_delivery(job.kind, job.ref_id, message.to)
                failures += 1
                last_error = str(exc)
                log.warning("delivery to %s failed: %s", message.to, exc)
        attempts = job.attempts + 1
        if failures == 0:
            self.db.settle_outbox_job(job.job_id, "done", attempts, now)
        elif attempts >= self.retry.attempts:
            self.db.settle_outbox_job(job.job_id, "dead", attempts, now, last_error)
            log.error("outbox job %d dead after %d attempts: %s",
                      job.job_id, attempts, last_error)
        else:
            next_at = now + timedelta(seconds=self.retry.delay(attempts))
            self.db.settle_outbox_job(job.job_id, "pending", attempts, next_at,
                                      last_error)
        return delivered

    def process_once(self, now: Optional[datetime] = None) -> int:
        """Drain everything currently due; returns deliveries made."""
        now = now or self.db.clock()
        return sum(self._process_job(job, now) for job in self.db.due_outbox_jobs(now))

    # -- background worker -----------------------------------------------------

    def start(self, poll_interval: float = 0.5) -> None:
        if self._thread is not None:
            return
        self._stop.clear()

        def run():
            while not self._stop.wait(poll_interval):
                try:
                    self.process_once()
                except Exception:
                    log.exception("outbox worker pass failed")

        self._thread = threading.Thread(target=run, name="esem-outbox", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join(timeout=10)
        self._thread = None
