"""
Atomic artifact writers (JSON, CSV, raw bytes).

Every output is written to a temporary file in the destination directory and
moved into place with os.replace, so readers never observe a partial file.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, List, Sequence

logger = logging.getLogger(__name__)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.info("Wrote %s (%d bytes)", target, len(payload))
    return target


def dumps_json(payload: Any) -> str:
    # sort_keys keeps reruns byte-identical
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def atomic_write_json(path: str | os.PathLike, payload: Any) -> Path:
    return atomic_write_bytes(path, dumps_json(payload).encode("utf-8"))


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow(list(row))
    return buffer.getvalue()


def atomic_write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    return atomic_write_bytes(path, render_csv(header, rows).encode("utf-8"))


def read_csv_rows(path: str | os.PathLike) -> List[List[str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        return [row for row in csv.reader(handle)]
