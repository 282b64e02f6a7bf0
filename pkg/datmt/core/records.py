"""
Input ingestion and NDJSON output for batch runs.

Inputs:
    query file      one query per line, or query<TAB>reference
    fixed pairs     source<TAB>target, first N rows used
    sentence file   one sentence per line (monolingual retrieval corpus)

Outputs:
    record file     one TranslationRecord per line, in input order
    summary/report  JSON documents written through a temp file
    manifest        <output>.manifest.json describing the run
"""

import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, TextIO, Tuple

from .generation import DemonstrationPair, Provenance

logger = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1


class RecordFileError(Exception):
    """Malformed input or record file; carries the offending line number."""

    def __init__(self, path, line_no: int, detail: str):
        super().__init__(f"{path}:{line_no}: {detail}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class QueryItem:
    text: str
    reference: Optional[str] = None


def _read_lines(path: Path) -> List[str]:
    try:
        return Path(path).read_text(encoding='utf-8').splitlines()
    except UnicodeDecodeError as e:
        raise RecordFileError(path, 0, f"not UTF-8 ({e})")


def read_queries(path: Path) -> List[QueryItem]:
    """Read queries, one per line, optionally followed by a TAB and a reference.

    Empty lines are kept as empty queries so that record indices match
    input line numbers; the pipeline reports them as per-record errors.
    A trailing empty line is ignored.
    """
    items = []
    for line in _read_lines(path):
        if '\t' in line:
            text, reference = line.split('\t', 1)
            items.append(QueryItem(text=text.strip(), reference=reference.strip() or None))
        else:
            items.append(QueryItem(text=line.strip()))
    return items


def read_sentences(path: Path) -> List[str]:
    """Non-empty lines of a monolingual corpus."""
    return [line.strip() for line in _read_lines(path) if line.strip()]


def read_fixed_pairs(path: Path, count: int = 4) -> List[DemonstrationPair]:
    """First count source<TAB>target rows as fixed demonstration pairs.

    Raises:
        RecordFileError: on a row without two non-empty columns
    """
    pairs = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        if len(pairs) == count:
            break
        if not line.strip():
            continue
        columns = line.split('\t')
        if len(columns) < 2 or not columns[0].strip() or not columns[1].strip():
            raise RecordFileError(path, line_no, "expected source<TAB>target")
        pairs.append(DemonstrationPair(source=columns[0].strip(), target=columns[1].strip(),
                                       provenance=Provenance.FIXED))
    if len(pairs) < count:
        logger.warning(f"{path}: only {len(pairs)} fixed pairs (asked for {count})")
    return pairs


def parse_split(text: str) -> List[Tuple[str, int]]:
    """Parse 'seed:500,eval:512' into [('seed', 500), ('eval', 512)].

    Raises:
        ValueError: on malformed parts, duplicate names or non-positive sizes
    """
    parts = []
    for chunk in text.split(','):
        chunk = chunk.strip()
        if ':' not in chunk:
            raise ValueError(f"split part {chunk!r}: expected name:size")
        name, size = chunk.split(':', 1)
        name = name.strip()
        size = int(size)
        if not name or size < 1:
            raise ValueError(f"split part {chunk!r}: empty name or size < 1")
        if name in dict(parts):
            raise ValueError(f"split name {name!r} appears twice")
        parts.append((name, size))
    if not parts:
        raise ValueError("empty split")
    return parts


def dumps_record(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def write_json_atomic(path: Path, data: Any):
    """Write JSON to path through a .tmp file renamed into place."""
    path = Path(path)
    tmp_path = path.with_name(path.name + '.tmp')
    with open(tmp_path, 'w', encoding='utf-8') as f:
        json.dump(data, f, sort_keys=True, ensure_ascii=False, indent=2)
        f.write('\n')
    tmp_path.rename(path)


class OrderedRecordWriter:
    """Write records in input order whatever order they complete in.

    Completed records are buffered until every earlier index is written,
    then flushed as a contiguous prefix.
    """

    def __init__(self, stream: TextIO, total: int,
                 on_record: Optional[Callable[[int, Dict[str, Any]], None]] = None):
        self.stream = stream
        self.total = total
        self.on_record = on_record
        self._pending: Dict[int, Dict[str, Any]] = {}
        self._next = 0
        self._lock = threading.Lock()

    @property
    def written(self) -> int:
        return self._next

    def add(self, index: int, record: Dict[str, Any]):
        with self._lock:
            if index < self._next or index in self._pending:
                raise ValueError(f"record {index} added twice")
            self._pending[index] = record
            while self._next in self._pending:
                ready = self._pending.pop(self._next)
                self.stream.write(dumps_record(ready) + '\n')
                self.stream.flush()
                if self.on_record is not None:
                    self.on_record(self._next, ready)
                self._next += 1

    def close(self):
        if self._pending:
            missing = self._next
            raise RuntimeError(f"{len(self._pending)} records never written (waiting for {missing})")


def read_records(path: Path) -> Iterator[Dict[str, Any]]:
    """Yield records from a record file.

    Raises:
        RecordFileError: on a malformed line or unsupported schema version
    """
    with open(path, encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as e:
                raise RecordFileError(path, line_no, f"malformed JSON ({e})")
            if not isinstance(record, dict) or 'query' not in record:
                raise RecordFileError(path, line_no, "not a translation record")
            version = record.get('schema_version')
            if version != RECORD_SCHEMA_VERSION:
                raise RecordFileError(path, line_no, f"unsupported schema_version {version!r}")
            yield record


@dataclass
class RunManifest:
    """Everything needed to re-run a batch against a replay store."""
    command: str
    settings: Dict[str, Any]
    overrides: Dict[str, Any]
    mode: str
    gateway_mode: str
    input_path: Optional[str] = None
    output_paths: List[str] = field(default_factory=list)
    template_dir: Optional[str] = None
    transcript_path: Optional[str] = None
    pool_path: Optional[str] = None
    split: List[Dict[str, Any]] = field(default_factory=list)
    timestamp: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec='seconds'))

    def to_dict(self) -> dict:
        return {
            'command': self.command,
            'settings': self.settings,
            'overrides': self.overrides,
            'mode': self.mode,
            'gateway_mode': self.gateway_mode,
            'input_path': self.input_path,
            'output_paths': list(self.output_paths),
            'template_dir': self.template_dir,
            'transcript_path': self.transcript_path,
            'pool_path': self.pool_path,
            'split': list(self.split),
            'timestamp': self.timestamp,
        }

    def write(self, output_path: Path) -> Path:
        path = manifest_path(output_path)
        write_json_atomic(path, self.to_dict())
        return path


def manifest_path(output_path: Path) -> Path:
    output_path = Path(output_path)
    return output_path.with_name(output_path.name + '.manifest.json')
