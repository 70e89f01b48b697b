"""Content-addressed blob storage for uploaded material.

Blobs live at ``<root>/<first two hex chars>/<full sha256 hex>``. Writes go
to a temp file in the same directory followed by an atomic rename, so a
crash never leaves a half-written blob under its final name. Identical
content stored twice lands on the same path.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path


class BlobStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest

    def put(self, data: bytes) -> str:
        """Store the bytes, return their sha256 hex digest."""
        digest = hashlib.sha256(data).hexdigest()
        final = self._path(digest)
        if final.exists():
            return digest
        final.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=final.parent, prefix=".incoming-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, final)
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise
        return digest

    def exists(self, digest: str) -> bool:
        return self._path(digest).is_file()

    def get(self, digest: str) -> bytes:
        return self._path(digest).read_bytes()

    def path_for(self, digest: str) -> Path:
        return self._path(digest)

    def count(self) -> int:
        """Number of stored blobs (temp files excluded)."""
        return sum(
            1
            for p in self.root.glob("*/*")
            if p.is_file() and not p.name.startswith(".incoming-")
        )
