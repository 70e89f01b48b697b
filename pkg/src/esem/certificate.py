"""Printable certificates of successful attendance.

Rendering is a pure function of the completion record and the names on
file: same inputs, byte-identical output. The document is self-contained
print-styled HTML (browser print dialog does the rest); no clock, network,
or external resources are consulted. The template is read once at
construction, from a configurable path or the bundled default.
"""

from __future__ import annotations

import html
from importlib import resources
from pathlib import Path
from string import Template
from typing import Optional

from .core import Seminar, User
from .db import CompletionRecord

MEDIA_TYPE = "text/html; charset=utf-8"


class CertificateError(Exception):
    pass


def _default_template() -> str:
    return (
        resources.files("esem").joinpath("templates/certificate.html").read_text()
    )


class CertificateRenderer:
    def __init__(self, template_path: Optional[str | Path] = None):
        if template_path is not None:
            text = Path(template_path).read_text()
        else:
            text = _default_template()
        self._template = Template(text)

    def render(self, record: CompletionRecord, holder: User, seminar: Seminar,
               tutor: User) -> bytes:
        """Render the certificate for a completed seminar.

        Only a holder matching the record may receive it; completion is
        proven by the record's existence, which callers must have checked
        against the history store.
        """
        if record is None:
            raise CertificateError("no completion record: certificate refused")
        if record.user_id != holder.user_id:
            raise CertificateError("holder does not match the completion record")
        if record.seminar_id != seminar.seminar_id:
            raise CertificateError("seminar does not match the completion record")
        document = self._template.substitute(
            serial=html.escape(record.certificate_serial),
            holder_name=html.escape(holder.full_name or holder.username),
            seminar_title=html.escape(record.seminar_title),
            tutor_name=html.escape(tutor.full_name or tutor.username),
            completed_at=record.completed_at.isoformat(),
        )
        return document.encode("utf-8")
