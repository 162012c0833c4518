"""Append-only on-disk key-value cache with first-write-wins semantics.

File format (versioned): a JSONL log whose first line is a header record
``{"format": <name>, "version": 1}``; every other line is
``{"key": <hex>, "value": <json>}``.  Entries are never rewritten, so a
crash mid-append loses at most the final line.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

from .errors import ForgeError

CACHE_VERSION = 1


class AppendOnlyCache:
    """Thread-safe key-value log; ``path=None`` keeps entries in memory only."""

    def __init__(self, path=None, format_name: str = "forge-cache"):
        self._path = Path(path) if path is not None else None
        self._format_name = format_name
        self._lock = threading.Lock()
        self._entries: dict[str, object] = {}
        if self._path is not None and self._path.exists():
            self._load()

    def _load(self) -> None:
        with open(self._path, "r", encoding="utf-8") as f:
            header_line = f.readline().strip()
            if not header_line:
                return
            header = json.loads(header_line)
            if header.get("format") != self._format_name or header.get("version") != CACHE_VERSION:
                raise ForgeError(
                    f"cache file {self._path} has unsupported header {header!r}; "
                    f"expected format={self._format_name!r} version={CACHE_VERSION}"
                )
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                self._entries.setdefault(rec["key"], rec["value"])

    def _append(self, key: str, value) -> None:
        self._path.parent.mkdir(parents=True, exist_ok=True)
        is_new = not self._path.exists()
        with open(self._path, "a", encoding="utf-8") as f:
            if is_new:
                f.write(json.dumps({"format": self._format_name, "version": CACHE_VERSION}) + "\n")
            f.write(json.dumps({"key": key, "value": value}, sort_keys=True, ensure_ascii=False) + "\n")

    def get(self, key: str):
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, value):
        """Commit ``value`` unless ``key`` is already present; returns the stored value."""
        with self._lock:
            if key in self._entries:
                return self._entries[key]
            self._entries[key] = value
            if self._path is not None:
                self._append(key, value)
            return value

    def __contains__(self, key: str) -> bool:
        with self._lock:
            return key in self._entries

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)
