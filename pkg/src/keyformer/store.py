"""Crash-safe template store: append-only record log with an in-memory index.

Each record is a length-prefixed JSON document followed by a CRC32 of the
document bytes. On open the log is scanned; a trailing record cut short by a
crash fails its length or checksum and the file is truncated back to the
last valid boundary, so at most that record is lost. Enrolment embeddings
are capped per user with FIFO eviction. Writes are serialized by a lock;
reads see consistent snapshots.
"""

from __future__ import annotations

import json
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import StoreError

MAX_ENROLMENTS = 10
_LEN = 4  # u32 little-endian length prefix, u32 crc suffix


@dataclass
class TemplateRecord:
    user_id: str
    embeddings: List[np.ndarray] = field(default_factory=list)
    created_at: float = 0.0
    updated_at: float = 0.0
    threshold: Optional[float] = None

    @property
    def sessions_enrolled(self) -> int:
        return len(self.embeddings)


class TemplateStore:
    """Append-only log of enrol/delete/threshold events, indexed by user."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._index: Dict[str, TemplateRecord] = {}
        self._open()

    # -- log plumbing -------------------------------------------------------

    def _open(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.touch()
            return
        raw = self.path.read_bytes()
        offset = 0
        valid = 0
        while offset + _LEN <= len(raw):
            n = int.from_bytes(raw[offset:offset + _LEN], "little")
            end = offset + _LEN + n + _LEN
            if n <= 0 or end > len(raw):
                break
            body = raw[offset + _LEN:offset + _LEN + n]
            crc = int.from_bytes(raw[end - _LEN:end], "little")
            if zlib.crc32(body) != crc:
                break
            try:
                self._apply(json.loads(body.decode("utf-8")))
            except (ValueError, KeyError) as exc:
                raise StoreError(f"{self.path}: undecodable record at byte {offset}: {exc}")
            offset = end
            valid = end
        if valid != len(raw):
            # crash-truncated tail: drop it so appends land on a clean boundary
            with self.path.open("r+b") as fh:
                fh.truncate(valid)

    def _append(self, doc: dict) -> None:
        body = json.dumps(doc, sort_keys=True).encode("utf-8")
        frame = (len(body).to_bytes(_LEN, "little") + body
                 + zlib.crc32(body).to_bytes(_LEN, "little"))
        with self.path.open("ab") as fh:
            fh.write(frame)
            fh.flush()

    def _apply(self, doc: dict) -> None:
        kind = doc["kind"]
        user = doc["user_id"]
        if kind == "enroll":
            rec = self._index.get(user)
            if rec is None:
                rec = TemplateRecord(user_id=user, created_at=doc["ts"])
                self._index[user] = rec
            rec.embeddings.append(np.asarray(doc["embedding"], dtype=np.float32))
            if len(rec.embeddings) > MAX_ENROLMENTS:
                rec.embeddings = rec.embeddings[-MAX_ENROLMENTS:]
            rec.updated_at = doc["ts"]
        elif kind == "delete":
            self._index.pop(user, None)
        elif kind == "threshold":
            rec = self._index.get(user)
            if rec is not None:
                rec.threshold = doc["threshold"]
                rec.updated_at = doc["ts"]
        else:
            raise StoreError(f"unknown record kind {kind!r}")

    # -- public API ----------------------------------------------------------

    def enroll(self, user_id: str, embedding: np.ndarray) -> TemplateRecord:
        doc = {"kind": "enroll", "user_id": user_id, "ts": time.time(),
               "embedding": [float(v) for v in np.asarray(embedding).reshape(-1)]}
        with self._lock:
            self._append(doc)
            self._apply(doc)
            return self._index[user_id]

    def delete(self, user_id: str) -> bool:
        with self._lock:
            if user_id not in self._index:
                return False
            self._append({"kind": "delete", "user_id": user_id, "ts": time.time()})
            self._apply({"kind": "delete", "user_id": user_id, "ts": time.time()})
            return True

    def set_threshold(self, user_id: str, threshold: float) -> TemplateRecord:
        doc = {"kind": "threshold", "user_id": user_id, "ts": time.time(),
               "threshold": float(threshold)}
        with self._lock:
            if user_id not in self._index:
                raise StoreError(f"unknown user {user_id!r}")
            self._append(doc)
            self._apply(doc)
            return self._index[user_id]

    def get(self, user_id: str) -> Optional[TemplateRecord]:
        with self._lock:
            return self._index.get(user_id)

    def users(self) -> List[TemplateRecord]:
        with self._lock:
            return sorted(self._index.values(), key=lambda r: r.user_id)
