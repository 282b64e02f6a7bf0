"""
Diagnostics over translation record files.

    Relevance   mean over records of mean alpha(query, demonstration source), x100
    Uniformity  mean over records of mean alpha(x_i, x_j) over ordered pairs i != j
                of the demonstration sources, x100
    Length      hypothesis token counts and a repeated-string flag rate
    Quality     optional external scorer over demonstration pairs
    Off-target  optional language detector over hypotheses

Records are the dicts of a record file (see pipeline.TranslationRecord.to_dict).
Failed records and records with too few demonstrations are excluded from
a metric and counted as such.
"""

import json
import logging
import math
import shlex
import subprocess
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .textngram import alpha, tokenize

logger = logging.getLogger(__name__)

SCALE = 100.0

# A token 4-gram repeated back to back this many times flags a hypothesis
REPEAT_ORDER = 4
REPEAT_TIMES = 3

QUANTILES = (('p10', 10), ('p25', 25), ('median', 50), ('p75', 75), ('p90', 90), ('max', 100))

Record = Mapping[str, Any]


class QualityScorerError(Exception):
    """External quality scorer failed or answered garbage."""


@dataclass
class MetricValue:
    """One diagnostic, x100 and raw, with inclusion accounting."""
    score: Optional[float]
    raw: Optional[float]
    included: int
    excluded: int
    per_query: List[Optional[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {'score': self.score, 'raw': self.raw, 'included': self.included,
                'excluded': self.excluded, 'per_query': list(self.per_query)}


def _sources(record: Record) -> List[str]:
    return [d['source'] for d in record.get('demonstrations') or []]


def _usable(record: Record) -> bool:
    return not record.get('error')


def _aggregate(per_query: List[Optional[float]]) -> MetricValue:
    values = [v for v in per_query if v is not None]
    raw = math.fsum(values) / len(values) if values else None
    return MetricValue(
        score=raw * SCALE if raw is not None else None,
        raw=raw,
        included=len(values),
        excluded=len(per_query) - len(values),
        per_query=[v * SCALE if v is not None else None for v in per_query],
    )


def record_relevance(record: Record) -> Optional[float]:
    """Mean alpha(query, source) over the record's demonstrations, or None."""
    sources = _sources(record)
    if not _usable(record) or not sources:
        return None
    query = tokenize(record['query'])
    return math.fsum(alpha(query, tokenize(s)) for s in sources) / len(sources)


def record_uniformity(record: Record) -> Optional[float]:
    """Mean alpha(x_i, x_j) over ordered pairs of demonstration sources, or None."""
    sources = [tokenize(s) for s in _sources(record)]
    if not _usable(record) or len(sources) < 2:
        return None
    values = [alpha(a, b) for i, a in enumerate(sources) for j, b in enumerate(sources) if i != j]
    return math.fsum(values) / len(values)


def relevance_report(records: Sequence[Record]) -> MetricValue:
    return _aggregate([record_relevance(r) for r in records])


def uniformity_report(records: Sequence[Record]) -> MetricValue:
    return _aggregate([record_uniformity(r) for r in records])


def relevance_metric(records: Sequence[Record]) -> Optional[float]:
    """Relevance x100; None when no record has a demonstration."""
    return relevance_report(records).score


def uniformity_metric(records: Sequence[Record]) -> Optional[float]:
    """Uniformity x100; None when no record has two demonstrations."""
    return uniformity_report(records).score


def subset_relevance(records: Sequence[Record],
                     subset_count: int = 5) -> Tuple[Optional[float], Optional[float],
                                                     List[Optional[float]]]:
    """Relevance over contiguous subsets of records.

    Returns:
        (mean, population std, per-subset scores); mean and std are None
        when no subset has a score
    """
    if not records:
        return None, None, []
    chunks = np.array_split(np.arange(len(records)), min(subset_count, len(records)))
    scores = [relevance_metric([records[i] for i in chunk]) for chunk in chunks]
    values = np.array([s for s in scores if s is not None], dtype=np.float64)
    if not len(values):
        return None, None, scores
    return float(values.mean()), float(values.std()), scores


# =============================================================================
# Lengths
# =============================================================================

def has_repeated_string(tokens: Sequence[str]) -> bool:
    """True when some token 4-gram occurs 3 times in a row."""
    span = REPEAT_ORDER * REPEAT_TIMES
    for start in range(len(tokens) - span + 1):
        gram = tuple(tokens[start:start + REPEAT_ORDER])
        if all(tuple(tokens[start + r * REPEAT_ORDER:start + (r + 1) * REPEAT_ORDER]) == gram
               for r in range(1, REPEAT_TIMES)):
            return True
    return False


@dataclass
class LengthStats:
    count: int
    mean_tokens: Optional[float]
    quantiles: Dict[str, float]
    repeated_count: int
    repeated_rate: Optional[float]
    token_counts: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            'count': self.count,
            'mean_tokens': self.mean_tokens,
            'quantiles': dict(self.quantiles),
            'repeated_count': self.repeated_count,
            'repeated_rate': self.repeated_rate,
        }


def length_stats(records: Sequence[Record]) -> LengthStats:
    """Token counts of hypotheses (records without one are skipped)."""
    tokenized = [tokenize(r['hypothesis']) for r in records if r.get('hypothesis')]
    counts = [len(t) for t in tokenized]
    repeated = sum(1 for t in tokenized if has_repeated_string(t))
    if not counts:
        return LengthStats(count=0, mean_tokens=None, quantiles={}, repeated_count=0,
                           repeated_rate=None)
    array = np.array(counts, dtype=np.float64)
    return LengthStats(
        count=len(counts),
        mean_tokens=float(array.mean()),
        quantiles={name: float(np.percentile(array, q)) for name, q in QUANTILES},
        repeated_count=repeated,
        repeated_rate=repeated / len(counts),
        token_counts=counts,
    )


# =============================================================================
# Hooks
# =============================================================================

class QualityScorer:
    """Scores (source, target) pairs; higher is better, expected in [0, 1]."""

    name = 'scorer'

    def score_pairs(self, pairs: Sequence[Tuple[str, str]]) -> List[float]:
        raise NotImplementedError


class SubprocessQualityScorer(QualityScorer):
    """External scorer speaking JSON lines.

    Input, one line per pair:   {"source": "...", "target": "..."}
    Output, one line per pair:  0.83   or   {"score": 0.83}
    """

    def __init__(self, command: str, timeout: float = 3600.0):
        self.command = command
        self.name = command
        self.timeout = timeout

    def score_pairs(self, pairs):
        if not pairs:
            return []
        payload = ''.join(json.dumps({'source': s, 'target': t}, ensure_ascii=False) + '\n'
                          for s, t in pairs)
        try:
            result = subprocess.run(shlex.split(self.command), input=payload, capture_output=True,
                                    text=True, encoding='utf-8', timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise QualityScorerError(f"Cannot run scorer {self.command!r}: {e}")
        if result.returncode != 0:
            raise QualityScorerError(f"Scorer exited with status {result.returncode}: "
                                     f"{result.stderr.strip()[:200]}")

        scores = []
        for line_no, line in enumerate(result.stdout.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                value = json.loads(line)
                if isinstance(value, dict):
                    value = value['score']
                scores.append(float(value))
            except (ValueError, KeyError, TypeError):
                raise QualityScorerError(f"Scorer output line {line_no} is not a score: {line!r}")
        if len(scores) != len(pairs):
            raise QualityScorerError(f"Scorer returned {len(scores)} scores for {len(pairs)} pairs")
        return scores


@dataclass
class QualityValue:
    status: str  # 'n/a', 'ok' or 'failed'
    score: Optional[float] = None
    pairs: int = 0
    detail: Optional[str] = None

    def render(self) -> str:
        if self.status == 'ok' and self.score is not None:
            return f"{self.score:.1f}"
        return self.status

    def to_dict(self) -> dict:
        return {'status': self.status, 'score': self.score, 'pairs': self.pairs,
                'detail': self.detail}


def quality_metric(records: Sequence[Record], scorer: Optional[QualityScorer]) -> QualityValue:
    """Mean scorer output x100 over every demonstration pair of usable records."""
    if scorer is None:
        return QualityValue(status='n/a')
    pairs = [(d['source'], d['target']) for r in records if _usable(r)
             for d in r.get('demonstrations') or []]
    if not pairs:
        return QualityValue(status='n/a', detail='no demonstration pairs')
    try:
        scores = scorer.score_pairs(pairs)
    except QualityScorerError as e:
        logger.warning(f"Quality scorer failed: {e}")
        return QualityValue(status='failed', pairs=len(pairs), detail=str(e))
    return QualityValue(status='ok', score=math.fsum(scores) / len(scores) * SCALE,
                        pairs=len(pairs))


def off_target_rate(records: Sequence[Record], detector: Callable[[str], str],
                    expected_language: str) -> Optional[float]:
    """Share of hypotheses the detector assigns to another language than expected."""
    hypotheses = [r['hypothesis'] for r in records if r.get('hypothesis')]
    if not hypotheses:
        return None
    off = sum(1 for h in hypotheses if detector(h) != expected_language)
    return off / len(hypotheses)


# =============================================================================
# Report
# =============================================================================

@dataclass
class ExampleSetReport:
    total: int
    relevance: MetricValue
    uniformity: MetricValue
    quality: QualityValue
    lengths: LengthStats
    example_count: Dict[int, int]
    failed: int = 0
    off_target: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            'total': self.total,
            'failed': self.failed,
            'relevance': self.relevance.to_dict(),
            'uniformity': self.uniformity.to_dict(),
            'quality': self.quality.to_dict(),
            'lengths': self.lengths.to_dict(),
            'example_count': {str(k): v for k, v in sorted(self.example_count.items())},
            'off_target_rate': self.off_target,
        }


def build_report(records: Sequence[Record], scorer: Optional[QualityScorer] = None,
                 detector: Optional[Callable[[str], str]] = None,
                 expected_language: Optional[str] = None) -> ExampleSetReport:
    histogram = Counter(len(r.get('demonstrations') or []) for r in records)
    off_target = None
    if detector is not None and expected_language:
        off_target = off_target_rate(records, detector, expected_language)
    return ExampleSetReport(
        total=len(records),
        failed=sum(1 for r in records if not _usable(r)),
        relevance=relevance_report(records),
        uniformity=uniformity_report(records),
        quality=quality_metric(records, scorer),
        lengths=length_stats(records),
        example_count=dict(histogram),
        off_target=off_target,
    )
