"""Content-addressed record/replay cache for endpoint responses.

The key is a stable sha256 over (endpoint_id, messages, temperature,
max_tokens); image content enters the key only through its uri string, so
caches stay portable and small. Records are one JSON file per key, written
atomically (tmp + rename), which makes concurrent writers safe: the worst
case is the same response written twice.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from typing import Optional


def request_key(
    endpoint_id: str,
    messages: list[dict],
    temperature: float,
    max_tokens: int,
) -> str:
    payload = {
        "endpoint_id": endpoint_id,
        "messages": messages,
        "temperature": temperature,
        "max_tokens": max_tokens,
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    writes: int = 0

    def as_dict(self) -> dict:
        return {"hits": self.hits, "misses": self.misses, "writes": self.writes}


@dataclass
class ResponseCache:
    directory: str
    stats: CacheStats = field(default_factory=CacheStats)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self) -> None:
        os.makedirs(self.directory, exist_ok=True)

    def _path(self, key: str) -> str:
        return os.path.join(self.directory, f"{key}.json")

    def get(self, key: str) -> Optional[dict]:
        try:
            with open(self._path(key), "r", encoding="utf-8") as fh:
                record = json.load(fh)
        except FileNotFoundError:
            with self._lock:
                self.stats.misses += 1
            return None
        with self._lock:
            self.stats.hits += 1
        return record

    def put(self, key: str, record: dict) -> None:
        path = self._path(key)
        tmp = f"{path}.tmp.{os.getpid()}.{threading.get_ident()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(record, fh, ensure_ascii=False, sort_keys=True)
        os.replace(tmp, path)
        with self._lock:
            self.stats.writes += 1

    def count_extra_miss(self) -> None:
        """Demote an already-counted hit to a miss.

        Used when a cached record exists but cannot serve the request (for
        example it lacks token scores the caller now needs)."""
        with self._lock:
            self.stats.hits -= 1
            self.stats.misses += 1
