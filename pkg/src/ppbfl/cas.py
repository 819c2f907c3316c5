"""In-process content-addressed blob store keyed by SHA-256."""

from __future__ import annotations

import hashlib
import re
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import IntegrityViolation, NotFound

_CID_RE = re.compile(r"cid:[0-9a-f]{64}")


@dataclass(frozen=True, order=True)
class Cid:
    text: str

    def __post_init__(self):
        if not _CID_RE.fullmatch(self.text):
            raise ValueError(f"not a cid: {self.text!r}")

    @classmethod
    def of(cls, content: bytes) -> "Cid":
        return cls("cid:" + hashlib.sha256(content).hexdigest())

    @classmethod
    def from_digest(cls, digest: bytes) -> "Cid":
        if len(digest) != 32:
            raise ValueError("cid digest must be 32 bytes")
        return cls("cid:" + digest.hex())

    @property
    def hex(self) -> str:
        return self.text[4:]

    @property
    def digest(self) -> bytes:
        return bytes.fromhex(self.hex)

    def __str__(self) -> str:
        return self.text


class ContentStore:
    """Thread-safe blob store; optionally mirrors blobs under ``root``.

    On-disk layout is ``<root>/<first two hex chars>/<full hex>.bin``.
    ``fetch_counts`` records how often each CID was read, which lets callers
    check that nothing is downloaded twice.
    """

    def __init__(self, root: str | Path | None = None):
        self._blobs: dict[Cid, bytes] = {}
        self._lock = threading.Lock()
        self.root = Path(root) if root is not None else None
        self.fetch_counts: Counter[Cid] = Counter()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, cid: Cid) -> Path:
        assert self.root is not None
        return self.root / cid.hex[:2] / f"{cid.hex}.bin"

    def put(self, content: bytes) -> Cid:
        content = bytes(content)
        cid = Cid.of(content)
        with self._lock:
            if cid in self._blobs:
                return cid
            self._blobs[cid] = content
            if self.root is not None:
                path = self._path(cid)
                if not path.exists():
                    path.parent.mkdir(parents=True, exist_ok=True)
                    tmp = path.with_suffix(".tmp")
                    tmp.write_bytes(content)
                    tmp.replace(path)
        return cid

    def get(self, cid: Cid) -> bytes:
        with self._lock:
            content = self._blobs.get(cid)
            if content is None and self.root is not None and self._path(cid).exists():
                content = self._path(cid).read_bytes()
                self._blobs[cid] = content
            if content is None:
                raise NotFound(cid.text)
            self.fetch_counts[cid] += 1
        if hashlib.sha256(content).hexdigest() != cid.hex:
            raise IntegrityViolation(f"stored bytes for {cid} do not hash to it")
        return content

    def __contains__(self, cid: Cid) -> bool:
        with self._lock:
            return cid in self._blobs or (self.root is not None and self._path(cid).exists())

    def __len__(self) -> int:
        with self._lock:
            return len(self._blobs)

    def reset_counts(self) -> None:
        with self._lock:
            self.fetch_counts.clear()
