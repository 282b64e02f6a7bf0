"""
Demonstration pool: accumulated (source, target) pairs with BM25 retrieval.

Retrieval is two-stage (R-BM25):
    1. the top_n entries by Okapi BM25 over source tokens (ties: lower insert sequence)
    2. reranked by alpha(query, source) descending (ties: lower insert sequence),
       first k returned

Store format (NDJSON, UTF-8):
    {"kind": "header", "schema_version": 1, "tokenizer": "...", "bm25": {"k1": .., "b": ..}}
    {"kind": "entry", "seq": 0, "source": "...", "target": "...", "provenance": "...",
     "origin_query": "..."}

A pool opened on a path holds an exclusive lock on <path>.lock and appends
each insert to the store. The BM25 index is never stored; it is rebuilt on
load and checked against the number of entry records.
"""

import fcntl
import json
import logging
import math
import os
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .generation import DemonstrationPair, Provenance
from .textngram import TOKENIZER_ID, TokenSequence, alpha, tokenize

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_K1 = 1.5
DEFAULT_B = 0.75


# =============================================================================
# Errors
# =============================================================================

class PoolError(Exception):
    """Base class for pool failures."""


class PoolLoadError(PoolError):
    """Malformed pool store."""

    def __init__(self, path, line_no: int, detail: str):
        super().__init__(f"{path}:{line_no}: {detail}")
        self.path = path
        self.line_no = line_no


class PoolVersionError(PoolError):
    """Store written with another schema version or tokenizer."""


class PoolLockedError(PoolError):
    """Another process holds the pool lock."""


class PoolPersistError(PoolError):
    """Write to the store failed; the in-memory pool still has the entry."""


# =============================================================================
# BM25
# =============================================================================

class Bm25Index:
    """Incremental Okapi BM25 index over token sequences.

        idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
        score(q, d) = sum over q's tokens (repeats included) of
                      idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
    """

    def __init__(self, k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.k1 = k1
        self.b = b
        self.document_frequencies: Counter = Counter()
        self.term_frequencies: List[Counter] = []
        self.lengths: List[int] = []
        self.total_length = 0
        self._postings: Dict[str, List[int]] = defaultdict(list)

    @classmethod
    def rebuild(cls, documents: Sequence[TokenSequence], k1: float = DEFAULT_K1,
                b: float = DEFAULT_B) -> 'Bm25Index':
        index = cls(k1=k1, b=b)
        for tokens in documents:
            index.add(tokens)
        return index

    @property
    def total_documents(self) -> int:
        return len(self.lengths)

    @property
    def average_document_length(self) -> float:
        if not self.lengths:
            return 0.0
        return self.total_length / len(self.lengths)

    def add(self, tokens: TokenSequence) -> int:
        """Index a document; returns its document id (0-based, insertion order)."""
        doc_id = len(self.lengths)
        tf = Counter(tokens)
        self.term_frequencies.append(tf)
        self.lengths.append(len(tokens))
        self.total_length += len(tokens)
        for term in tf:
            self.document_frequencies[term] += 1
            self._postings[term].append(doc_id)
        return doc_id

    def idf(self, term: str) -> float:
        df = self.document_frequencies.get(term, 0)
        n = self.total_documents
        return math.log(1 + (n - df + 0.5) / (df + 0.5))

    def _term_weight(self, idf: float, tf: int, dl: int, avgdl: float) -> float:
        k1, b = self.k1, self.b
        return idf * (tf * (k1 + 1)) / (tf + k1 * (1 - b + b * dl / avgdl))

    def score(self, query_tokens: Sequence[str], doc_id: int) -> float:
        tf = self.term_frequencies[doc_id]
        dl = self.lengths[doc_id]
        avgdl = self.average_document_length
        total = 0.0
        for term in query_tokens:
            count = tf.get(term, 0)
            if count:
                total += self._term_weight(self.idf(term), count, dl, avgdl)
        return total

    def score_all(self, query_tokens: Sequence[str]) -> List[float]:
        """Scores of every document, in document id order."""
        scores = [0.0] * self.total_documents
        if not scores:
            return scores
        avgdl = self.average_document_length
        for term in query_tokens:
            postings = self._postings.get(term)
            if not postings:
                continue
            idf = self.idf(term)
            for doc_id in postings:
                scores[doc_id] += self._term_weight(
                    idf, self.term_frequencies[doc_id][term], self.lengths[doc_id], avgdl)
        return scores

    def state(self) -> dict:
        """Comparable snapshot of the index statistics."""
        return {
            'k1': self.k1,
            'b': self.b,
            'document_frequencies': dict(self.document_frequencies),
            'term_frequencies': [dict(tf) for tf in self.term_frequencies],
            'lengths': list(self.lengths),
            'total_length': self.total_length,
        }


@dataclass(frozen=True)
class RankedDocument:
    doc_id: int
    bm25: float
    alpha: float


def rbm25_rank(query_tokens: TokenSequence, documents: Sequence[TokenSequence],
               index: Bm25Index, top_n: int, k: int,
               tie_keys: Optional[Sequence[int]] = None,
               exclude_query: bool = False) -> List[RankedDocument]:
    """Two-stage BM25 then n-gram recall ranking.

    Args:
        query_tokens: Tokenized query
        documents: Token sequences, indexed by document id
        index: BM25 index over documents
        top_n: Stage-1 shortlist size
        k: Number of results
        tie_keys: Per-document tie-break keys (default: document id)
        exclude_query: Skip documents token-identical to the query

    Raises:
        ValueError: if k > top_n or either is < 1
    """
    if k < 1 or top_n < 1:
        raise ValueError(f"k and top_n must be >= 1 (k={k}, top_n={top_n})")
    if k > top_n:
        raise ValueError(f"k ({k}) must not exceed top_n ({top_n})")

    tie = tie_keys if tie_keys is not None else range(len(documents))
    scores = index.score_all(query_tokens)
    query_tokens = tuple(query_tokens)
    doc_ids = [d for d in range(len(documents))
               if not (exclude_query and tuple(documents[d]) == query_tokens)]

    shortlist = sorted(doc_ids, key=lambda d: (-scores[d], tie[d]))[:top_n]
    recall = {d: alpha(query_tokens, documents[d]) for d in shortlist}
    reranked = sorted(shortlist, key=lambda d: (-recall[d], tie[d]))[:k]
    return [RankedDocument(doc_id=d, bm25=scores[d], alpha=recall[d]) for d in reranked]


# =============================================================================
# File lock
# =============================================================================

class PoolLock:
    """Exclusive non-blocking flock on <store>.lock, holding our PID."""

    def __init__(self, store_path: Path):
        self.lock_file = Path(str(store_path) + '.lock')
        self.lock_fd = None

    @property
    def locked(self) -> bool:
        return self.lock_fd is not None

    def acquire(self):
        """Take the lock.

        Raises:
            PoolLockedError: if another process holds it
        """
        self.lock_file.parent.mkdir(parents=True, exist_ok=True)
        fd = open(self.lock_file, 'a+')
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            fd.seek(0)
            holder = fd.read().strip() or 'unknown'
            fd.close()
            raise PoolLockedError(f"Pool {self.lock_file} is locked by PID {holder}")
        fd.seek(0)
        fd.truncate(0)
        fd.write(str(os.getpid()))
        fd.flush()
        self.lock_fd = fd

    def release(self):
        if self.lock_fd is None:
            return
        try:
            fcntl.flock(self.lock_fd, fcntl.LOCK_UN)
            self.lock_fd.close()
        finally:
            self.lock_fd = None


# =============================================================================
# Pool
# =============================================================================

@dataclass(frozen=True)
class PoolEntry:
    pair: DemonstrationPair
    source_tokens: TokenSequence
    insert_sequence: int
    origin_query: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            'kind': 'entry',
            'seq': self.insert_sequence,
            'source': self.pair.source,
            'target': self.pair.target,
            'provenance': self.pair.provenance.value,
            'origin_query': self.origin_query,
        }


@dataclass(frozen=True)
class InsertResult:
    entry: PoolEntry
    duplicate: bool


@dataclass(frozen=True)
class RetrievedEntry:
    entry: PoolEntry
    bm25: float
    alpha: float

    @property
    def pair(self) -> DemonstrationPair:
        return DemonstrationPair(source=self.entry.pair.source, target=self.entry.pair.target,
                                 provenance=Provenance.POOLED)


@dataclass
class VerifyResult:
    ok: bool
    total_documents: int
    problems: List[str] = field(default_factory=list)


@dataclass
class PoolStats:
    size: int
    total_documents: int
    vocabulary_size: int
    average_source_length: float
    source_length_quantiles: Dict[str, float]
    average_target_length: float

    def to_dict(self) -> dict:
        return {
            'size': self.size,
            'total_documents': self.total_documents,
            'vocabulary_size': self.vocabulary_size,
            'average_source_length': self.average_source_length,
            'source_length_quantiles': dict(self.source_length_quantiles),
            'average_target_length': self.average_target_length,
        }


def _header(k1: float, b: float) -> dict:
    return {'kind': 'header', 'schema_version': SCHEMA_VERSION, 'tokenizer': TOKENIZER_ID,
            'bm25': {'k1': k1, 'b': b}}


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


class DemonstrationPool:
    """Single-writer, multi-reader pool of demonstration pairs."""

    def __init__(self, k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.index = Bm25Index(k1=k1, b=b)
        self._entries: List[PoolEntry] = []
        self._keys: Dict[Tuple[TokenSequence, str], PoolEntry] = {}
        self._next_sequence = 0
        self._mutex = threading.RLock()
        self.path: Optional[Path] = None
        self._lock: Optional[PoolLock] = None

    def __len__(self):
        with self._mutex:
            return len(self._entries)

    @property
    def entries(self) -> List[PoolEntry]:
        with self._mutex:
            return list(self._entries)

    # -------------------------------------------------------------------------
    # Mutation
    # -------------------------------------------------------------------------

    def _add(self, entry: PoolEntry):
        self._entries.append(entry)
        self._keys[(entry.source_tokens, entry.pair.target)] = entry
        self.index.add(entry.source_tokens)
        self._next_sequence = entry.insert_sequence + 1

    def insert(self, pair: DemonstrationPair, origin_query: Optional[str] = None) -> InsertResult:
        """Add a pair; exact (source tokens, target) duplicates are skipped.

        Raises:
            ValueError: if the source has no tokens
            PoolPersistError: if appending to the attached store fails
                (the entry stays in memory)
        """
        tokens = tokenize(pair.source)
        if not tokens:
            raise ValueError(f"source has no tokens: {pair.source!r}")
        with self._mutex:
            existing = self._keys.get((tokens, pair.target))
            if existing is not None:
                logger.debug(f"Duplicate pair skipped: {pair.source!r}")
                return InsertResult(entry=existing, duplicate=True)
            entry = PoolEntry(pair=pair, source_tokens=tokens,
                              insert_sequence=self._next_sequence, origin_query=origin_query)
            self._add(entry)
            if self.path is not None:
                self._append(entry)
            return InsertResult(entry=entry, duplicate=False)

    def _append(self, entry: PoolEntry):
        try:
            needs_header = not self.path.exists() or self.path.stat().st_size == 0
            with open(self.path, 'a', encoding='utf-8') as f:
                if needs_header:
                    f.write(_dumps(_header(self.index.k1, self.index.b)) + '\n')
                f.write(_dumps(entry.to_dict()) + '\n')
                f.flush()
        except OSError as e:
            raise PoolPersistError(f"Cannot append to {self.path}: {e}")

    # -------------------------------------------------------------------------
    # Retrieval
    # -------------------------------------------------------------------------

    def bm25_score(self, query_tokens: Sequence[str], entry: PoolEntry) -> float:
        with self._mutex:
            return self.index.score(query_tokens, self._doc_id(entry))

    def _doc_id(self, entry: PoolEntry) -> int:
        # Sequences are strictly increasing, so document ids follow them
        lo, hi = 0, len(self._entries)
        while lo < hi:
            mid = (lo + hi) // 2
            if self._entries[mid].insert_sequence < entry.insert_sequence:
                lo = mid + 1
            else:
                hi = mid
        if lo == len(self._entries) or self._entries[lo] != entry:
            raise KeyError(f"entry {entry.insert_sequence} is not in this pool")
        return lo

    def retrieve_scored(self, query: str, top_n: int, k: int) -> List[RetrievedEntry]:
        """R-BM25 retrieval with both stage scores.

        Raises:
            ValueError: if k > top_n
        """
        with self._mutex:
            if not self._entries:
                if k > top_n:
                    raise ValueError(f"k ({k}) must not exceed top_n ({top_n})")
                return []
            ranked = rbm25_rank(
                tokenize(query),
                [e.source_tokens for e in self._entries],
                self.index, top_n, k,
                tie_keys=[e.insert_sequence for e in self._entries],
            )
            return [RetrievedEntry(entry=self._entries[r.doc_id], bm25=r.bm25, alpha=r.alpha)
                    for r in ranked]

    def rbm25_retrieve(self, query: str, top_n: int, k: int) -> List[DemonstrationPair]:
        """Up to k pooled pairs for query, in rerank order; empty for an empty pool."""
        return [r.pair for r in self.retrieve_scored(query, top_n, k)]

    # -------------------------------------------------------------------------
    # Checks and statistics
    # -------------------------------------------------------------------------

    def verify(self) -> VerifyResult:
        """Compare the incremental index with a from-scratch rebuild."""
        with self._mutex:
            problems = []
            rebuilt = Bm25Index.rebuild([e.source_tokens for e in self._entries],
                                        k1=self.index.k1, b=self.index.b)
            if rebuilt.state() != self.index.state():
                problems.append("incremental index differs from rebuilt index")
            if self.index.total_documents != len(self._entries):
                problems.append(f"index has {self.index.total_documents} documents "
                                f"for {len(self._entries)} entries")
            previous = -1
            for entry in self._entries:
                if entry.insert_sequence <= previous:
                    problems.append(f"insert sequence {entry.insert_sequence} not increasing")
                previous = entry.insert_sequence
                if entry.source_tokens != tokenize(entry.pair.source):
                    problems.append(f"entry {entry.insert_sequence}: stale source tokens")
            return VerifyResult(ok=not problems, total_documents=self.index.total_documents,
                                problems=problems)

    def stats(self) -> PoolStats:
        with self._mutex:
            source_lengths = np.array(self.index.lengths, dtype=np.float64)
            target_lengths = np.array([len(tokenize(e.pair.target)) for e in self._entries],
                                      dtype=np.float64)
            quantiles = {}
            if len(source_lengths):
                for name, q in (('min', 0), ('p25', 25), ('median', 50), ('p75', 75), ('max', 100)):
                    quantiles[name] = float(np.percentile(source_lengths, q))
            return PoolStats(
                size=len(self._entries),
                total_documents=self.index.total_documents,
                vocabulary_size=len(self.index.document_frequencies),
                average_source_length=float(source_lengths.mean()) if len(source_lengths) else 0.0,
                source_length_quantiles=quantiles,
                average_target_length=float(target_lengths.mean()) if len(target_lengths) else 0.0,
            )

    # -------------------------------------------------------------------------
    # Persistence
    # -------------------------------------------------------------------------

    def persist(self, path: Optional[Path] = None):
        """Rewrite the whole store (header + entries) through a temp file.

        Raises:
            PoolPersistError: on write failure
        """
        path = Path(path) if path is not None else self.path
        if path is None:
            raise PoolPersistError("No path to persist the pool to")
        tmp_path = path.with_name(path.name + '.tmp')
        with self._mutex:
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(tmp_path, 'w', encoding='utf-8') as f:
                    f.write(_dumps(_header(self.index.k1, self.index.b)) + '\n')
                    for entry in self._entries:
                        f.write(_dumps(entry.to_dict()) + '\n')
                tmp_path.rename(path)
            except OSError as e:
                if tmp_path.exists():
                    tmp_path.unlink()
                raise PoolPersistError(f"Cannot write {path}: {e}")
        logger.info(f"Persisted {len(self._entries)} pool entries to {path}")

    def snapshot(self, size: Optional[int] = None) -> 'DemonstrationPool':
        """In-memory copy holding the first size entries (default: all), not attached to a file."""
        with self._mutex:
            copy = DemonstrationPool(k1=self.index.k1, b=self.index.b)
            for entry in self._entries[:size]:
                copy._add(entry)
            return copy

    def compact(self):
        """Rewrite the attached store in canonical form."""
        self.persist()

    def export_tsv(self, path: Path) -> int:
        """Write source<TAB>target lines in insert order; returns the line count."""
        def clean(text):
            return ' '.join(text.split())

        with self._mutex:
            with open(path, 'w', encoding='utf-8') as f:
                for entry in self._entries:
                    f.write(f"{clean(entry.pair.source)}\t{clean(entry.pair.target)}\n")
            return len(self._entries)

    @classmethod
    def load(cls, path: Path) -> 'DemonstrationPool':
        """Read a store and rebuild the index.

        An empty file gives an empty pool.

        Raises:
            PoolLoadError: malformed line, duplicate or out-of-order entry
            PoolVersionError: unknown schema version or tokenizer
        """
        path = Path(path)
        pool = None
        entry_records = 0
        with open(path, encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except ValueError as e:
                    raise PoolLoadError(path, line_no, f"malformed JSON ({e})")
                if not isinstance(record, dict):
                    raise PoolLoadError(path, line_no, "record is not an object")

                if pool is None:
                    pool = cls._from_header(path, line_no, record)
                    continue

                if record.get('kind') != 'entry':
                    raise PoolLoadError(path, line_no, f"unexpected record kind {record.get('kind')!r}")
                pool._load_entry(path, line_no, record)
                entry_records += 1

        if pool is None:
            return cls()
        if pool.index.total_documents != entry_records:
            raise PoolLoadError(path, 0, f"index has {pool.index.total_documents} documents "
                                         f"for {entry_records} entry records")
        logger.debug(f"Loaded {entry_records} pool entries from {path}")
        return pool

    @classmethod
    def _from_header(cls, path, line_no: int, record: dict) -> 'DemonstrationPool':
        if record.get('kind') != 'header':
            raise PoolLoadError(path, line_no, "first record must be the header")
        version = record.get('schema_version')
        if version != SCHEMA_VERSION:
            raise PoolVersionError(f"{path}: schema_version {version!r}, "
                                   f"expected {SCHEMA_VERSION}")
        tokenizer = record.get('tokenizer')
        if tokenizer != TOKENIZER_ID:
            raise PoolVersionError(f"{path}: tokenizer {tokenizer!r}, expected {TOKENIZER_ID}")
        bm25 = record.get('bm25') or {}
        try:
            return cls(k1=float(bm25.get('k1', DEFAULT_K1)), b=float(bm25.get('b', DEFAULT_B)))
        except (TypeError, ValueError):
            raise PoolLoadError(path, line_no, "invalid bm25 parameters")

    def _load_entry(self, path, line_no: int, record: dict):
        try:
            pair = DemonstrationPair(source=record['source'], target=record['target'],
                                     provenance=Provenance(record.get('provenance', 'generated')))
            seq = record['seq']
        except (KeyError, TypeError, ValueError) as e:
            raise PoolLoadError(path, line_no, f"invalid entry ({e})")
        if not isinstance(seq, int) or seq < self._next_sequence:
            raise PoolLoadError(path, line_no, f"insert sequence {seq!r} is not increasing")
        tokens = tokenize(pair.source)
        if not tokens:
            raise PoolLoadError(path, line_no, "entry source has no tokens")
        if (tokens, pair.target) in self._keys:
            raise PoolLoadError(path, line_no, "duplicate entry")
        self._add(PoolEntry(pair=pair, source_tokens=tokens, insert_sequence=seq,
                            origin_query=record.get('origin_query')))

    @classmethod
    def open(cls, path: Path, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> 'DemonstrationPool':
        """Lock the store, load it if present, and append future inserts to it.

        Raises:
            PoolLockedError: another process has the pool open
            PoolLoadError, PoolVersionError: as load()
        """
        path = Path(path)
        lock = PoolLock(path)
        lock.acquire()
        try:
            if path.exists():
                pool = cls.load(path)
            else:
                pool = cls(k1=k1, b=b)
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, 'w', encoding='utf-8') as f:
                    f.write(_dumps(_header(k1, b)) + '\n')
        except BaseException:
            lock.release()
            raise
        pool.path = path
        pool._lock = lock
        return pool

    def close(self):
        if self._lock is not None:
            self._lock.release()
            self._lock = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


class SourceCorpus:
    """Monolingual source sentences indexed for R-BM25 retrieval."""

    def __init__(self, sentences: Sequence[str], k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.sentences: List[str] = []
        self.tokens: List[TokenSequence] = []
        seen = set()
        for sentence in sentences:
            sentence = sentence.strip()
            tokens = tokenize(sentence)
            if not tokens or tokens in seen:
                continue
            seen.add(tokens)
            self.sentences.append(sentence)
            self.tokens.append(tokens)
        self.index = Bm25Index.rebuild(self.tokens, k1=k1, b=b)

    def __len__(self):
        return len(self.sentences)

    def retrieve(self, query: str, top_n: int, k: int) -> List[str]:
        """Up to k sentences for query; sentences token-identical to it are skipped."""
        if not self.sentences:
            return []
        ranked = rbm25_rank(tokenize(query), self.tokens, self.index, top_n, k,
                            exclude_query=True)
        return [self.sentences[r.doc_id] for r in ranked]
