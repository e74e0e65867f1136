"""
Append-only event log as JSONL. One JSON object per line.
Run commands log into {run_dir}/events.jsonl; library code called outside a run
falls back to workflows/events.jsonl (relative to repo root or cwd).
Schema: workflows/event_log_schema.json.
"""

import json
import time
from pathlib import Path
from typing import Any, Dict, Optional

# Set by the CLI for the duration of a command; None means the fallback path.
_ACTIVE_LOG: Optional[Path] = None


def utc_timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def set_event_log(path: Optional[Path]) -> None:
    """Route log_event() calls without an explicit path to `path`."""
    global _ACTIVE_LOG
    _ACTIVE_LOG = Path(path) if path is not None else None


def active_event_log() -> Optional[Path]:
    return _ACTIVE_LOG


def append_jsonl(
    record: Dict[str, Any],
    path: Optional[Path] = None,
    repo_root: Optional[Path] = None,
) -> None:
    """
    Append a single JSON object as one line to path.
    Non-JSON values (numpy scalars, Paths) are stringified.
    """
    if path is None:
        path = _ACTIVE_LOG
    if path is None:
        base = repo_root or Path.cwd()
        path = base / "workflows" / "events.jsonl"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(record, ensure_ascii=False, default=_jsonable) + "\n"
    with open(path, "a", encoding="utf-8") as f:
        f.write(line)


def log_event(event: str, path: Optional[Path] = None, **fields: Any) -> Dict[str, Any]:
    """Stamp and append one event record; returns the record."""
    record = {"timestamp": utc_timestamp(), "event": event, **fields}
    append_jsonl(record, path=path)
    return record


def _jsonable(value: Any) -> Any:
    if hasattr(value, "item"):
        return value.item()
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)
