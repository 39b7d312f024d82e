import json
import logging
import threading
from collections.abc import Iterable
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Generator

from stockrater.config import SCHEMA_VERSION
from stockrater.utils import canonical_json

PREDICTIONS_FILENAME = "predictions.jsonl"
SUMMARIES_FILENAME = "summaries.jsonl"
SENTIMENT_FILENAME = "sentiment.jsonl"
TRANSCRIPTS_FILENAME = "transcripts.jsonl"
MANIFEST_FILENAME = "run_manifest.json"

logger = logging.getLogger(__name__)


@contextmanager
def open_store(path: Path, mode: str = "a") -> Generator[IO[str], None, None]:
    """
    Opens a JSONL store, creating its directory when writing.
    """
    if mode != "r":
        path.parent.mkdir(parents=True, exist_ok=True)
    f = open(path, mode, encoding="utf-8", newline="\n")
    try:
        yield f
    finally:
        f.close()


def append_records(path: Path, records: Iterable[dict[str, Any]]) -> int:
    count = 0
    with open_store(path, "a") as f:
        for record in records:
            f.write(canonical_json(record) + "\n")
            count += 1
    return count


def load_records(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        return []
    records = []
    with open_store(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.decoder.JSONDecodeError:
                # A partial trailing line is what an interrupted append leaves behind
                logger.warning("Skipping unreadable line [%d] in store: %s", line_number, path)
    return records


def rewrite_records(path: Path, records: Iterable[dict[str, Any]]) -> int:
    count = 0
    with open_store(path, "w") as f:
        for record in records:
            f.write(canonical_json(record) + "\n")
            count += 1
    return count


def save_prediction(path: Path, record: dict[str, Any]) -> None:
    append_records(path, [{"schema_version": SCHEMA_VERSION, **record}])


def load_prediction_keys(path: Path) -> set[str]:
    return {r["cell_key"] for r in load_records(path)}


def load_predictions(path: Path, status: str | None = "ok") -> list[dict[str, Any]]:
    records = load_records(path)
    unsupported = {r.get("schema_version") for r in records} - {SCHEMA_VERSION}
    if unsupported:
        raise ValueError(f"Prediction store [{path}] has unsupported schema version(s): {sorted(unsupported, key=str)}")
    return [r for r in records if status is None or r["status"] == status]


def delete_company(path: Path, company_id: str) -> int:
    records = load_records(path)
    kept = [r for r in records if r.get("company") != company_id]
    rewrite_records(path, kept)
    return len(records) - len(kept)


def clear_store(path: Path) -> int:
    count = len(load_records(path))
    if path.exists():
        path.unlink()
    logger.info("Store cleared of all [%d] records: %s", count, path)
    return count


def get_table_data(path: Path) -> tuple[list[str], list[list[str]]]:
    headers = ["company", "rating_date", "status", "ratings", "max_input_date"]
    table_data = []
    for r in load_records(path):
        ratings = " ".join(f"{e['horizon_months']}m:{e['rating']:+d}" for e in (r.get("prediction") or {}).get("entries", []))
        table_data.append([r.get("company", ""), r.get("rating_date", ""), r.get("status", ""), ratings or r.get("reason", ""), r.get("max_input_date", "")])
    return headers, table_data


def _scoped_key(record: dict[str, Any]) -> tuple[str, str, str, str]:
    return record["scope"], record["key"], record["month"], record["digest"]


def load_scoped(path: Path) -> dict[tuple[str, str, str, str], dict[str, Any]]:
    """Summary or sentiment records keyed by (scope, key, month, digest); the first write wins."""
    keyed: dict[tuple[str, str, str, str], dict[str, Any]] = {}
    for record in load_records(path):
        keyed.setdefault(_scoped_key(record), record)
    return keyed


def save_scoped(path: Path, record: dict[str, Any]) -> bool:
    """
    Appends the record unless its key is already stored. Keys are indexed in memory per file and
    reloaded only when the file size no longer matches what this process last wrote or read.
    """
    key = _scoped_key(record)
    with _scoped_lock:
        index = _scoped_index(path)
        if key in index.keys:
            return False
        append_records(path, [record])
        index.keys.add(key)
        index.size = _file_size(path)
    return True


@dataclass
class _ScopedIndex:
    size: int
    keys: set[tuple[str, str, str, str]] = field(default_factory=set)


_scoped_indexes: dict[Path, _ScopedIndex] = {}
_scoped_lock = threading.Lock()


def _file_size(path: Path) -> int:
    return path.stat().st_size if path.exists() else 0


def _scoped_index(path: Path) -> _ScopedIndex:
    resolved = path.resolve()
    size = _file_size(resolved)
    index = _scoped_indexes.get(resolved)
    if index is None or index.size != size:
        index = _ScopedIndex(size=size, keys=set(load_scoped(resolved)))
        _scoped_indexes[resolved] = index
    return index
