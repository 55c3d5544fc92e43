"""Content-addressed on-disk response cache.

Entries live at ``<root>/<key[:2]>/<key>.json``; writes go through a temp
file and ``os.replace`` so a killed run never leaves a torn entry behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def make_key(*fields: Any) -> str:
    blob = json.dumps(list(fields), ensure_ascii=False, separators=(",", ":"), sort_keys=True)
    return sha256_hex(blob)


class ResponseCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self._guard = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            with self._guard:
                self.misses += 1
            return None
        with self._guard:
            self.hits += 1
        return json.loads(raw)

    def put(self, key: str, value: dict) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(value, fh, ensure_ascii=False, sort_keys=True)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @contextmanager
    def writer(self, key: str) -> Iterator[None]:
        """Exclusive section for one key, so concurrent misses fetch once."""
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            yield

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*/*.json"))
