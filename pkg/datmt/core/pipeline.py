"""
Translation pipeline: one query, a batch, or an accumulate-then-evaluate run.

Modes and gateway calls per query:

    zero_shot        query alone                                  1
    few_shot_fixed   fixed pairs as demonstrations                1
    dat              generated demonstrations                     2 + |demos|
    dat_fixed        generated, fixed pairs in target generation  2 + |demos|
    dat_accumulate   R-BM25 over the demonstration pool           1
    retrieval        R-BM25 over a monolingual corpus, translated 1 + |demos|

Per-query state is isolated. The only thing shared between queries is the
pool, and only accumulation runs write to it.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import ConfigError
from .gateway import ChatExchange, ChatGateway, GatewayError, GenerationParams
from .generation import (
    PURPOSE_QUERY,
    DemonstrationPair,
    GenerationError,
    LanguagePair,
    PairGenerationError,
    build_demonstrations,
    translate_sources,
)
from .metrics import subset_relevance
from .mmr import FilterConfig, NoCandidatesError, SelectionTrace
from .pool import DemonstrationPool, PoolError, PoolPersistError, SourceCorpus
from .records import RECORD_SCHEMA_VERSION, OrderedRecordWriter, QueryItem
from .templates import PromptSet

logger = logging.getLogger(__name__)

STAGES = ('demonstrations', 'translation', 'total')

FLAG_FILTERING_BYPASSED = 'filtering_bypassed'
FLAG_SHORTFALL = 'shortfall'
FLAG_EMPTY_POOL_FALLBACK = 'empty_pool_fallback'

# Errors captured into a record instead of aborting the batch
RECORDABLE_ERRORS = (GatewayError, GenerationError, PairGenerationError, NoCandidatesError,
                     PoolError, ValueError)


class Mode(Enum):
    ZERO_SHOT = 'zero_shot'
    FEW_SHOT_FIXED = 'few_shot_fixed'
    DAT = 'dat'
    DAT_FIXED = 'dat_fixed'
    DAT_ACCUMULATE = 'dat_accumulate'
    RETRIEVAL = 'retrieval'

    @property
    def generates(self) -> bool:
        return self in (Mode.DAT, Mode.DAT_FIXED)


@dataclass
class PipelineConfig:
    mode: Mode
    prompts: PromptSet
    filter: FilterConfig = field(default_factory=FilterConfig)
    langs: LanguagePair = field(default_factory=LanguagePair)
    params: GenerationParams = field(default_factory=GenerationParams)
    fixed_pairs: Optional[List[DemonstrationPair]] = None
    pool: Optional[DemonstrationPool] = None
    sources: Optional[SourceCorpus] = None
    shot_count: int = 4
    top_n: int = 100
    translate_workers: int = 1

    def validate(self):
        """Check mode requirements.

        Raises:
            ConfigError: on a missing resource or inconsistent sizes
        """
        if self.shot_count < 1:
            raise ConfigError(f"shot_count must be >= 1, got {self.shot_count}", key='shots')
        needs_fixed = self.mode in (Mode.FEW_SHOT_FIXED, Mode.DAT_FIXED)
        if needs_fixed and not self.fixed_pairs:
            raise ConfigError(f"mode {self.mode.value} needs fixed pairs", key='fixed_pairs')
        if self.mode == Mode.DAT_ACCUMULATE and self.pool is None:
            raise ConfigError("mode dat_accumulate needs a demonstration pool", key='pool')
        if self.mode == Mode.RETRIEVAL and self.sources is None:
            raise ConfigError("mode retrieval needs a source corpus", key='sources')
        if self.mode.generates and self.filter.k > self.shot_count:
            raise ConfigError(f"k ({self.filter.k}) must not exceed shots ({self.shot_count})",
                              key='k')
        if self.mode in (Mode.DAT_ACCUMULATE, Mode.RETRIEVAL) and self.shot_count > self.top_n:
            raise ConfigError(f"shots ({self.shot_count}) must not exceed top_n ({self.top_n})",
                              key='top_n')


@dataclass(frozen=True)
class ExchangeRef:
    """Reference to one gateway exchange of a record."""
    purpose: str
    fingerprint: str
    usage: Optional[Dict[str, int]] = None

    @classmethod
    def of(cls, purpose: str, exchange: ChatExchange) -> 'ExchangeRef':
        return cls(purpose=purpose, fingerprint=exchange.fingerprint(), usage=exchange.usage)

    def to_dict(self) -> dict:
        return {'purpose': self.purpose, 'fingerprint': self.fingerprint, 'usage': self.usage}


@dataclass
class TranslationRecord:
    index: int
    query: str
    mode: Mode
    reference: Optional[str] = None
    hypothesis: Optional[str] = None
    demonstrations_used: List[DemonstrationPair] = field(default_factory=list)
    selection_trace: Optional[SelectionTrace] = None
    candidates: List[str] = field(default_factory=list)
    exchanges: List[ExchangeRef] = field(default_factory=list)
    timing: Dict[str, float] = field(default_factory=dict)
    flags: Dict[str, bool] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self, include_timing: bool = False) -> dict:
        """Record as written to record files.

        Timings are left out unless asked for, so replayed runs give
        byte-identical files.
        """
        data = {
            'schema_version': RECORD_SCHEMA_VERSION,
            'index': self.index,
            'query': self.query,
            'reference': self.reference,
            'mode': self.mode.value,
            'hypothesis': self.hypothesis,
            'demonstrations': [p.to_dict() for p in self.demonstrations_used],
            'selection_trace': self.selection_trace.to_dict() if self.selection_trace else None,
            'candidates': list(self.candidates),
            'exchanges': [e.to_dict() for e in self.exchanges],
            'flags': dict(sorted(self.flags.items())),
            'error': self.error,
        }
        if include_timing:
            data['timing'] = dict(self.timing)
        return data


def _demonstrations_for(query: str, config: PipelineConfig, gateway: ChatGateway,
                        record: TranslationRecord, on_exchange) -> List[DemonstrationPair]:
    mode = config.mode

    if mode == Mode.ZERO_SHOT:
        return []

    if mode == Mode.FEW_SHOT_FIXED:
        return list(config.fixed_pairs[:config.shot_count])

    if mode.generates:
        fixed = config.fixed_pairs if mode == Mode.DAT_FIXED else None
        build = build_demonstrations(query, config.filter, config.langs, gateway,
                                     config.prompts, config.params, fixed_pairs=fixed,
                                     workers=config.translate_workers, on_exchange=on_exchange)
        record.selection_trace = build.trace
        record.candidates = [c.text for c in build.candidates]
        record.flags[FLAG_FILTERING_BYPASSED] = build.filtering_bypassed
        record.flags[FLAG_SHORTFALL] = build.shortfall
        return build.pairs

    if mode == Mode.DAT_ACCUMULATE:
        pairs = config.pool.rbm25_retrieve(query, config.top_n, config.shot_count)
        record.flags[FLAG_EMPTY_POOL_FALLBACK] = not pairs
        if not pairs:
            logger.warning(f"Empty pool: translating query {record.index} zero-shot")
        return pairs

    if mode == Mode.RETRIEVAL:
        sources = config.sources.retrieve(query, config.top_n, config.shot_count)
        record.candidates = list(sources)
        record.flags[FLAG_EMPTY_POOL_FALLBACK] = not sources
        if not sources:
            logger.warning(f"Empty source corpus: translating query {record.index} zero-shot")
            return []
        return translate_sources(sources, config.langs, gateway, config.prompts, config.params,
                                 fixed_pairs=config.fixed_pairs,
                                 workers=config.translate_workers, on_exchange=on_exchange)

    raise ValueError(f"Unknown mode {mode}")


def translate(query: str, config: PipelineConfig, gateway: ChatGateway,
              index: int = 0, reference: Optional[str] = None) -> TranslationRecord:
    """Translate one query under config.

    Runtime failures (gateway, generation, empty query) do not raise: they
    produce a record with error set and no hypothesis.

    Args:
        query: Source-language sentence
        config: Validated pipeline configuration
        gateway: Chat gateway
        index: Position of the query in its batch
        reference: Optional reference translation, copied to the record

    Returns:
        TranslationRecord
    """
    record = TranslationRecord(index=index, query=query, mode=config.mode, reference=reference)

    def on_exchange(purpose, exchange):
        record.exchanges.append(ExchangeRef.of(purpose, exchange))

    started = time.perf_counter()
    try:
        if not query.strip():
            raise ValueError("empty query")

        stage = time.perf_counter()
        demonstrations = _demonstrations_for(query, config, gateway, record, on_exchange)
        record.demonstrations_used = list(demonstrations)
        record.timing['demonstrations'] = time.perf_counter() - stage

        stage = time.perf_counter()
        messages = config.prompts.query_translation(query, config.langs.source,
                                                    config.langs.target, demonstrations)
        exchange = gateway.complete(messages, config.params)
        on_exchange(PURPOSE_QUERY, exchange)
        record.hypothesis = exchange.response_text.strip()
        record.timing['translation'] = time.perf_counter() - stage
    except RECORDABLE_ERRORS as e:
        record.error = f"{type(e).__name__}: {e}"
        record.hypothesis = None
        logger.error(f"Query {index} failed: {record.error}")
    record.timing['total'] = time.perf_counter() - started
    return record


# =============================================================================
# Batches
# =============================================================================

@dataclass
class BatchSummary:
    total: int = 0
    succeeded: int = 0
    failed: int = 0
    failures: List[Dict[str, Any]] = field(default_factory=list)
    flag_counts: Dict[str, int] = field(default_factory=dict)
    demonstrations_total: int = 0
    gateway_calls: int = 0
    timing: Dict[str, Dict[str, float]] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        data = {
            'total': self.total,
            'succeeded': self.succeeded,
            'failed': self.failed,
            'failures': list(self.failures),
            'flag_counts': dict(sorted(self.flag_counts.items())),
            'demonstrations_total': self.demonstrations_total,
            'gateway_calls': self.gateway_calls,
        }
        if include_timing:
            data['timing'] = self.timing
            data['wall_time'] = self.wall_time
        return data


def summarize(records: Sequence[TranslationRecord], gateway_calls: int = 0,
              wall_time: float = 0.0) -> BatchSummary:
    summary = BatchSummary(total=len(records), gateway_calls=gateway_calls, wall_time=wall_time)
    for record in sorted(records, key=lambda r: r.index):
        if record.ok:
            summary.succeeded += 1
            summary.demonstrations_total += len(record.demonstrations_used)
        else:
            summary.failed += 1
            summary.failures.append({'index': record.index, 'error': record.error})
        for flag, value in record.flags.items():
            if value:
                summary.flag_counts[flag] = summary.flag_counts.get(flag, 0) + 1
    for stage in STAGES:
        values = np.array([r.timing[stage] for r in records if stage in r.timing],
                          dtype=np.float64)
        if len(values):
            summary.timing[stage] = {
                'mean': float(values.mean()),
                'max': float(values.max()),
                'total': float(values.sum()),
            }
    return summary


def run_batch(queries: Sequence[QueryItem], config: PipelineConfig, gateway: ChatGateway,
              output_path: Path, parallel: int = 1,
              on_record: Optional[Callable[[TranslationRecord], None]] = None,
              progress: Optional[Callable[[], None]] = None) -> BatchSummary:
    """Translate queries and stream records to output_path in input order.

    Args:
        queries: Query items (text and optional reference)
        config: Shared pipeline configuration
        gateway: Chat gateway, shared by all workers
        output_path: NDJSON record file (overwritten)
        parallel: Maximum queries in flight; each query then translates its
            demonstrations one at a time, so gateway calls in flight never
            exceed parallel
        on_record: Called with each record, in input order, after it is written
        progress: Called once per completed query

    Returns:
        BatchSummary

    Raises:
        ConfigError: invalid configuration (nothing is written)
        ValueError: empty query list
    """
    config.validate()
    if not queries:
        raise ValueError("no queries to translate")
    if parallel < 1:
        raise ConfigError(f"parallel must be >= 1, got {parallel}", key='parallel')
    if config.translate_workers > 1:
        config = replace(config, translate_workers=1)

    calls_before = gateway.call_count
    started = time.perf_counter()
    records: Dict[int, TranslationRecord] = {}
    output_path = Path(output_path)

    with open(output_path, 'w', encoding='utf-8') as stream:
        def written(index, _):
            if on_record is not None:
                on_record(records[index])

        writer = OrderedRecordWriter(stream, len(queries), on_record=written)

        def complete(record):
            records[record.index] = record
            writer.add(record.index, record.to_dict())
            if progress is not None:
                progress()

        if parallel == 1:
            for i, item in enumerate(queries):
                complete(translate(item.text, config, gateway, index=i, reference=item.reference))
        else:
            with ThreadPoolExecutor(max_workers=parallel) as executor:
                futures = [executor.submit(translate, item.text, config, gateway, i, item.reference)
                           for i, item in enumerate(queries)]
                for future in as_completed(futures):
                    complete(future.result())
        writer.close()

    ordered = [records[i] for i in range(len(queries))]
    summary = summarize(ordered, gateway_calls=gateway.call_count - calls_before,
                        wall_time=time.perf_counter() - started)
    logger.info(f"Batch done: {summary.succeeded}/{summary.total} succeeded, "
                f"{summary.gateway_calls} gateway calls")
    return summary


# =============================================================================
# Accumulation
# =============================================================================

@dataclass
class SweepPoint:
    """Evaluation against the pool built from the first seed_count seed queries."""
    seed_count: int
    pool_size: int
    summary: BatchSummary
    output_path: Path
    relevance_mean: Optional[float] = None
    relevance_std: Optional[float] = None
    subset_relevance: List[Optional[float]] = field(default_factory=list)

    def to_dict(self, include_timing: bool = True) -> dict:
        return {
            'seed_count': self.seed_count,
            'pool_size': self.pool_size,
            'output_path': str(self.output_path),
            'summary': self.summary.to_dict(include_timing=include_timing),
            'relevance_mean': self.relevance_mean,
            'relevance_std': self.relevance_std,
            'subset_relevance': list(self.subset_relevance),
        }


@dataclass
class AccumulationResult:
    pool_size: int
    pairs_inserted: int
    duplicates_skipped: int
    persist_failures: int
    seed_summary: Optional[BatchSummary]
    eval_summary: BatchSummary
    sweep: List[SweepPoint] = field(default_factory=list)

    def to_dict(self, include_timing: bool = True) -> dict:
        return {
            'pool_size': self.pool_size,
            'pairs_inserted': self.pairs_inserted,
            'duplicates_skipped': self.duplicates_skipped,
            'persist_failures': self.persist_failures,
            'seed_summary': (self.seed_summary.to_dict(include_timing)
                             if self.seed_summary else None),
            'eval_summary': self.eval_summary.to_dict(include_timing),
            'sweep': [p.to_dict(include_timing) for p in self.sweep],
        }


def sweep_output_path(eval_output: Path, seed_count: int) -> Path:
    eval_output = Path(eval_output)
    return eval_output.with_name(f"{eval_output.stem}.seed{seed_count}{eval_output.suffix}")


def accumulate_then_evaluate(seed_queries: Sequence[QueryItem],
                             eval_queries: Sequence[QueryItem],
                             config: PipelineConfig, gateway: ChatGateway,
                             pool: DemonstrationPool, seed_output: Path, eval_output: Path,
                             parallel: int = 1, prefixes: Optional[Sequence[int]] = None,
                             subset_count: int = 5,
                             progress: Optional[Callable[[], None]] = None) -> AccumulationResult:
    """Grow the pool with DAT over seed queries, then evaluate from the frozen pool.

    Seed records are inserted into the pool in input order, so the pool
    after the first p seeds is a prefix of the final pool. Each requested
    prefix is evaluated over the same eval queries; the full seed count is
    always evaluated and written to eval_output.

    Raises:
        ConfigError: invalid configuration
        ValueError: overlapping seed and eval queries, or a prefix out of range
    """
    # empty queries fail per record, they never count as shared
    overlap = ({q.text for q in seed_queries if q.text.strip()}
               & {q.text for q in eval_queries if q.text.strip()})
    if overlap:
        raise ValueError(f"seed and eval queries overlap ({len(overlap)} shared)")
    if not eval_queries:
        raise ValueError("no eval queries")

    prefixes = sorted(set(prefixes or [])) or [len(seed_queries)]
    if prefixes[0] < 0 or prefixes[-1] > len(seed_queries):
        raise ValueError(f"seed prefixes must be within 0..{len(seed_queries)}")
    if prefixes[-1] != len(seed_queries):
        prefixes.append(len(seed_queries))

    seed_mode = Mode.DAT_FIXED if config.fixed_pairs else Mode.DAT
    seed_config = replace(config, mode=seed_mode, pool=None)
    eval_config = replace(config, mode=Mode.DAT_ACCUMULATE, pool=pool)
    seed_config.validate()
    eval_config.validate()

    # pool size after each seed query, by seed index
    sizes_after: List[int] = []
    counters = {'inserted': 0, 'duplicates': 0, 'persist_failures': 0}

    def insert_pairs(record: TranslationRecord):
        if record.ok:
            for pair in record.demonstrations_used:
                try:
                    result = pool.insert(pair, origin_query=record.query)
                except PoolPersistError as e:
                    counters['persist_failures'] += 1
                    logger.error(str(e))
                    continue
                if result.duplicate:
                    counters['duplicates'] += 1
                else:
                    counters['inserted'] += 1
        sizes_after.append(len(pool))

    base_size = len(pool)
    seed_summary = None
    if seed_queries:
        seed_summary = run_batch(seed_queries, seed_config, gateway, seed_output,
                                 parallel=parallel, on_record=insert_pairs, progress=progress)
        logger.info(f"Pool grew from {base_size} to {len(pool)} entries")

    sweep = []
    for seed_count in prefixes:
        size = sizes_after[seed_count - 1] if seed_count else base_size
        frozen = pool.snapshot(size)
        point_config = replace(eval_config, pool=frozen)
        is_final = seed_count == len(seed_queries)
        output = Path(eval_output) if is_final else sweep_output_path(eval_output, seed_count)

        collected: List[TranslationRecord] = []
        summary = run_batch(eval_queries, point_config, gateway, output, parallel=parallel,
                            on_record=collected.append, progress=progress)
        mean, std, subsets = subset_relevance([r.to_dict() for r in collected], subset_count)
        sweep.append(SweepPoint(seed_count=seed_count, pool_size=size, summary=summary,
                                output_path=output, relevance_mean=mean, relevance_std=std,
                                subset_relevance=subsets))

    return AccumulationResult(
        pool_size=len(pool),
        pairs_inserted=counters['inserted'],
        duplicates_skipped=counters['duplicates'],
        persist_failures=counters['persist_failures'],
        seed_summary=seed_summary,
        eval_summary=sweep[-1].summary,
        sweep=sweep,
    )
