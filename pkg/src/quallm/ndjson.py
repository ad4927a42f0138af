"""Newline-delimited JSON helpers used by every stage that touches disk."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator


def dumps(record: Any) -> str:
    """Canonical single-line encoding (sorted keys, raw unicode)."""
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def write_records(path: Path, records: Iterable[Any]) -> int:
    """Overwrite *path* with one record per line; returns the record count."""
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dumps(record) + "\n")
            count += 1
    return count


def append_record(path: Path, record: Any) -> None:
    """Append one record and flush it so a crash loses at most the last line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(dumps(record) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def iter_records(path: Path) -> Iterator[Any]:
    """Yield parsed records, skipping blank lines. Raises on corrupt JSON."""
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def read_records(path: Path) -> list[Any]:
    return list(iter_records(path))
