"""
Demonstration generation.

For one query:
    1. one call asks the LLM for m relevant-yet-diverse source sentences
    2. the response is parsed into deduplicated candidates
    3. mmr_select keeps k of them (skipped when m == k)
    4. each kept source is translated by the LLM (one call each)

The result is at most k (source, target) pairs in selection order.
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

from .gateway import ChatExchange, ChatGateway, GenerationParams, MalformedResponseError
from .mmr import FilterConfig, SelectionTrace, mmr_select
from .templates import PromptSet
from .textngram import TokenSequence, tokenize

logger = logging.getLogger(__name__)

# Call purposes, as tagged on exchange references
PURPOSE_SOURCES = 'source_generation'
PURPOSE_TARGET = 'target_generation'
PURPOSE_QUERY = 'query_translation'

# One automatic retry for unusable generations
GENERATION_ATTEMPTS = 2

# "1." "2)" "(3)" "4:" or a bullet, followed by whitespace
_MARKER_RE = re.compile(r'^\s*(?:\(?\d{1,3}[.):]\)?|[-*•])\s+')
_QUOTE_PAIRS = {'"': '"', '“': '”', '„': '“', "'": "'", '‘': '’', '«': '»'}

ExchangeCallback = Callable[[str, ChatExchange], None]


class GenerationError(Exception):
    """No parseable candidate sentence, even after a retry."""

    def __init__(self, message: str, raw_response: str = ''):
        super().__init__(message)
        self.raw_response = raw_response


class PairGenerationError(Exception):
    """Empty translation of a source sentence, even after a retry."""

    def __init__(self, source: str, detail: str = ''):
        message = f"Could not translate source sentence {source!r}"
        if detail:
            message += f": {detail}"
        super().__init__(message)
        self.source = source


class Provenance(Enum):
    GENERATED = 'generated'
    FIXED = 'fixed'
    POOLED = 'pooled'


@dataclass(frozen=True)
class LanguagePair:
    source: str = 'English'
    target: str = 'Swahili'


@dataclass(frozen=True)
class DemonstrationPair:
    """A (source, target) example placed before the query."""
    source: str
    target: str
    provenance: Provenance = Provenance.GENERATED

    def __post_init__(self):
        if not self.source.strip() or not self.target.strip():
            raise ValueError("demonstration pair sides must not be empty")

    def to_dict(self) -> dict:
        return {'source': self.source, 'target': self.target,
                'provenance': self.provenance.value}

    @classmethod
    def from_dict(cls, data: dict) -> 'DemonstrationPair':
        return cls(source=data['source'], target=data['target'],
                   provenance=Provenance(data.get('provenance', 'generated')))


@dataclass(frozen=True)
class CandidateSource:
    """A parsed source sentence from the generation response."""
    text: str
    tokens: TokenSequence
    origin_index: int

    def to_dict(self) -> dict:
        return {'text': self.text, 'origin_index': self.origin_index}


@dataclass
class DemonstrationBuild:
    """Outcome of build_demonstrations for one query."""
    pairs: List[DemonstrationPair]
    candidates: List[CandidateSource]
    trace: SelectionTrace
    filtering_bypassed: bool = False
    exchanges: List[Tuple[str, ChatExchange]] = field(default_factory=list)

    @property
    def shortfall(self) -> bool:
        return self.trace.shortfall


# =============================================================================
# Parsing
# =============================================================================

def _strip_decorations(line: str) -> Tuple[str, bool]:
    """Remove enumeration markers and surrounding quotes until stable.

    Returns:
        (cleaned text, whether an enumeration marker was found)
    """
    text = line.strip()
    marked = False
    while True:
        before = text
        match = _MARKER_RE.match(text)
        if match:
            text = text[match.end():].strip()
            marked = True
        if len(text) >= 2 and _QUOTE_PAIRS.get(text[0]) == text[-1]:
            text = text[1:-1].strip()
        if text == before:
            return text, marked


def parse_candidates(response_text: str, query_tokens: TokenSequence,
                     m: int) -> List[CandidateSource]:
    """Parse a numbered or bulleted list of sentences.

    If any line carries an enumeration marker, unmarked lines (preamble,
    closing remarks) are dropped. Blank candidates, candidates without
    tokens, token-level duplicates and copies of the query are removed;
    at most m candidates are kept.

    Args:
        response_text: Raw LLM response
        query_tokens: Tokenized query, excluded from the result
        m: Maximum number of candidates

    Returns:
        Candidates in response order
    """
    parsed = [_strip_decorations(line) for line in response_text.splitlines()]
    parsed = [(text, marked) for text, marked in parsed if text]
    if any(marked for _, marked in parsed):
        parsed = [(text, marked) for text, marked in parsed if marked]

    candidates = []
    seen = set()
    for origin_index, (text, _) in enumerate(parsed):
        tokens = tokenize(text)
        if not tokens or tokens in seen or tokens == tuple(query_tokens):
            continue
        seen.add(tokens)
        candidates.append(CandidateSource(text=text, tokens=tokens, origin_index=origin_index))
        if len(candidates) == m:
            break
    return candidates


def _first_line(text: str, target_lang: str) -> str:
    for line in text.strip().splitlines():
        line = line.strip()
        label = f"{target_lang}:"
        if line.startswith(label):
            line = line[len(label):].strip()
        if line:
            return line
    return ''


# =============================================================================
# Generation steps
# =============================================================================

def _emit(on_exchange: Optional[ExchangeCallback], purpose: str, exchange: ChatExchange):
    if on_exchange is not None:
        on_exchange(purpose, exchange)


def generate_sources(query: str, m: int, langs: LanguagePair, gateway: ChatGateway,
                     prompts: PromptSet, params: GenerationParams,
                     on_exchange: Optional[ExchangeCallback] = None) -> List[CandidateSource]:
    """Ask the LLM for m source sentences relevant to query and parse them.

    Raises:
        ValueError: if m < 1
        GenerationError: if no candidate parses after one retry
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    query_tokens = tokenize(query)
    messages = prompts.source_generation(query, m, langs.source)

    raw = ''
    for attempt in range(1, GENERATION_ATTEMPTS + 1):
        try:
            exchange = gateway.complete(messages, params)
        except MalformedResponseError as e:
            logger.warning(f"Source generation attempt {attempt}: {e}")
            continue
        _emit(on_exchange, PURPOSE_SOURCES, exchange)
        raw = exchange.response_text
        candidates = parse_candidates(raw, query_tokens, m)
        if candidates:
            logger.debug(f"Parsed {len(candidates)} candidates (asked for {m})")
            return candidates
        logger.warning(f"Source generation attempt {attempt}: no parseable candidate")

    raise GenerationError(
        f"No candidate sentence after {GENERATION_ATTEMPTS} attempts for query {query!r}",
        raw_response=raw,
    )


def translate_source(source: str, langs: LanguagePair, gateway: ChatGateway,
                     prompts: PromptSet, params: GenerationParams,
                     fixed_pairs: Optional[Sequence[DemonstrationPair]] = None,
                     on_exchange: Optional[ExchangeCallback] = None) -> DemonstrationPair:
    """Translate one source sentence with the LLM.

    Fixed pairs, when given, are used as in-context examples of that call.
    The first non-empty line of the response is the translation.

    Raises:
        ValueError: if source is empty
        PairGenerationError: if the translation is empty after one retry
    """
    if not source.strip():
        raise ValueError("source must not be empty")
    messages = prompts.target_generation(source, langs.source, langs.target,
                                         fixed_pairs or ())
    for attempt in range(1, GENERATION_ATTEMPTS + 1):
        try:
            exchange = gateway.complete(messages, params)
        except MalformedResponseError as e:
            logger.warning(f"Translation attempt {attempt} for {source!r}: {e}")
            continue
        _emit(on_exchange, PURPOSE_TARGET, exchange)
        target = _first_line(exchange.response_text, langs.target)
        if target:
            return DemonstrationPair(source=source, target=target,
                                     provenance=Provenance.GENERATED)
        logger.warning(f"Translation attempt {attempt} for {source!r}: empty text")

    raise PairGenerationError(source, f"empty translation after {GENERATION_ATTEMPTS} attempts")


def translate_sources(sources: Sequence[str], langs: LanguagePair, gateway: ChatGateway,
                      prompts: PromptSet, params: GenerationParams,
                      fixed_pairs: Optional[Sequence[DemonstrationPair]] = None,
                      workers: int = 1,
                      on_exchange: Optional[ExchangeCallback] = None) -> List[DemonstrationPair]:
    """Translate several sources, possibly concurrently; results keep input order.

    Exchanges are reported to on_exchange in input order once all calls are done.
    """
    def translate_one(source):
        collected = []
        pair = translate_source(source, langs, gateway, prompts, params, fixed_pairs,
                                on_exchange=lambda purpose, ex: collected.append((purpose, ex)))
        return pair, collected

    if workers > 1 and len(sources) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(sources))) as executor:
            futures = [executor.submit(translate_one, s) for s in sources]
            results = [f.result() for f in futures]
    else:
        results = [translate_one(s) for s in sources]

    pairs = []
    for pair, collected in results:
        pairs.append(pair)
        for purpose, exchange in collected:
            _emit(on_exchange, purpose, exchange)
    return pairs


def build_demonstrations(query: str, config: FilterConfig, langs: LanguagePair,
                         gateway: ChatGateway, prompts: PromptSet, params: GenerationParams,
                         fixed_pairs: Optional[Sequence[DemonstrationPair]] = None,
                         workers: int = 1,
                         on_exchange: Optional[ExchangeCallback] = None) -> DemonstrationBuild:
    """Generate, filter and translate demonstrations for query.

    Args:
        query: User query (source language)
        config: m, k, lambda; m == k bypasses filtering
        langs: Source and target language names
        gateway: Chat gateway
        prompts: Prompt templates
        params: Decoding parameters
        fixed_pairs: Optional examples for the target-side translation calls only
        workers: Concurrent translation calls
        on_exchange: Called with (purpose, exchange) for every successful call

    Returns:
        DemonstrationBuild with min(k, usable candidates) pairs in selection order

    Raises:
        GenerationError: no usable candidate
        PairGenerationError: a selected source could not be translated
    """
    exchanges: List[Tuple[str, ChatExchange]] = []

    def collect(purpose, exchange):
        exchanges.append((purpose, exchange))
        _emit(on_exchange, purpose, exchange)

    candidates = generate_sources(query, config.m, langs, gateway, prompts, params,
                                  on_exchange=collect)

    if config.filtering_enabled:
        trace = mmr_select(tokenize(query), [c.tokens for c in candidates], config)
        bypassed = False
    else:
        kept = min(config.k, len(candidates))
        trace = SelectionTrace(selected=list(range(kept)), requested=config.k,
                               shortfall=len(candidates) < config.k)
        bypassed = True
        logger.debug("m == k: filtering bypassed, candidates used in generation order")

    if trace.shortfall:
        logger.warning(f"Only {len(candidates)} usable candidates for k={config.k} "
                       f"(query {query!r})")

    chosen = [candidates[i].text for i in trace.selected]
    pairs = translate_sources(chosen, langs, gateway, prompts, params, fixed_pairs,
                              workers=workers, on_exchange=collect)
    return DemonstrationBuild(pairs=pairs, candidates=candidates, trace=trace,
                              filtering_bypassed=bypassed, exchanges=exchanges)
