"""Service configuration: a flat key=value file.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Unknown keys are rejected so typos surface at startup instead of being
silently defaulted. The config path comes from the CLI flag or the
ESEM_CONFIG environment variable (flag wins).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class Config:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8421
    db_path: str = "esem.db"
    blob_dir: str = "blobs"
    upload_max_bytes: int = 25 * 1024 * 1024
    session_ttl_seconds: int = 86400
    default_completion_threshold: str = "4/5"
    password_hash_iterations: int = 100_000
    mail_gateway: str = "capture"  # "capture" | "smtp"
    smtp_host: str = "localhost"
    smtp_port: int = 25
    smtp_username: str = ""
    smtp_password: str = ""
    smtp_sender: str = "seminars@localhost"
    mail_retry_attempts: int = 3
    mail_retry_base_seconds: float = 5.0
    mail_poll_interval_seconds: float = 0.5
    capture_inspect_route: bool = False


_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _coerce(name: str, kind: type, raw: str):
    if kind is bool:
        try:
            return _BOOL_WORDS[raw.strip().lower()]
        except KeyError:
            raise ValueError(f"config key {name}: expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_config(text: str) -> Config:
    # field kinds from the defaults; annotations are strings under PEP 563
    kinds = {f.name: type(getattr(Config(), f.name)) for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in kinds:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, kinds[key], raw.strip())
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from exc
    return Config(**values)


def load_config(path: str | Path) -> Config:
    return parse_config(Path(path).read_text())
