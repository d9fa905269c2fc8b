"""Console + JSONL event logging.

Human-readable ``[tag] message key=value`` lines go to stderr. If ``OLDN_LOG_PATH``
is set, the same event is appended there as one JSON object per line.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Any

import orjson

_sink_failed = False


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def log_event(tag: str, message: str, **fields: Any) -> None:
    global _sink_failed
    extra = " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
    line = f"[{tag}] {message}" + (f" {extra}" if extra else "")
    print(line, file=sys.stderr, flush=True)
    log_path = os.environ.get("OLDN_LOG_PATH")
    if not log_path:
        return
    try:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {"tag": tag, "msg": message, **fields}
        with path.open("ab") as fh:
            fh.write(orjson.dumps(record, default=str) + b"\n")
    except OSError as err:
        # Console output continues; the sink failure is reported once per process.
        if not _sink_failed:
            _sink_failed = True
            print(f"[logs] cannot write OLDN_LOG_PATH={log_path}: {err}", file=sys.stderr, flush=True)
