"""
Chat-completion gateway for datmt.

Every LLM call of the pipeline goes through a ChatGateway:

    HttpGateway       live OpenAI-compatible endpoint (httpx + tenacity retries)
    RecordingGateway  wraps a live gateway, appends each exchange to a transcript
    ReplayGateway     serves recorded exchanges by exact message list, no network

Transcript stores are NDJSON, one exchange per line:
    {"messages": [...], "params": {...}, "response_text": "...", "usage": {...}}

The auth token is only sent in the Authorization header. It is never stored
in transcripts and is redacted from anything logged.
"""

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import httpx
from tenacity import (
    Retrying,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

logger = logging.getLogger(__name__)

ROLES = ('system', 'user', 'assistant')
CHAT_COMPLETIONS_PATH = '/chat/completions'
REDACTED = '***'

Message = Dict[str, str]


# =============================================================================
# Errors
# =============================================================================

class GatewayError(Exception):
    """Base class for gateway failures."""

    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status


class GatewayTransportError(GatewayError):
    """Retries exhausted on transient failures (timeout, 429, 5xx)."""


class GatewayAuthError(GatewayError):
    """Non-retryable client error (4xx other than 429): bad token, model or URL."""


class MalformedResponseError(GatewayError):
    """Endpoint answered but the first choice has no usable text."""


class UnrecordedExchangeError(GatewayError):
    """Replay store has no exchange for the requested message list."""

    def __init__(self, divergent_index: int, divergent_message: Optional[Message]):
        if divergent_message is None:
            detail = f"message list ends at #{divergent_index}"
        else:
            content = divergent_message.get('content', '')
            if len(content) > 80:
                content = content[:77] + '...'
            detail = f"message #{divergent_index} ({divergent_message.get('role')}): {content!r}"
        super().__init__(f"Unrecorded exchange; first divergent {detail}")
        self.divergent_index = divergent_index
        self.divergent_message = divergent_message


class _TransientFailure(Exception):
    """Internal: a failure worth retrying."""

    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status


# =============================================================================
# Types
# =============================================================================

@dataclass(frozen=True)
class GenerationParams:
    """Decoding parameters shared by every call of a run."""
    temperature: float = 0.1
    max_output_tokens: int = 1024
    model_name: str = "llama-3.1-8b-instruct"

    def __post_init__(self):
        if not self.temperature >= 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_output_tokens < 1:
            raise ValueError(f"max_output_tokens must be >= 1, got {self.max_output_tokens}")
        if not self.model_name:
            raise ValueError("model_name must not be empty")

    def to_dict(self) -> dict:
        return {
            'temperature': self.temperature,
            'max_output_tokens': self.max_output_tokens,
            'model_name': self.model_name,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'GenerationParams':
        return cls(**data)


@dataclass(frozen=True)
class GatewayConfig:
    """Connection settings for the live endpoint."""
    endpoint_url: str
    auth_token: Optional[str] = field(default=None, repr=False)
    retry_limit: int = 3
    backoff_base: float = 1.0
    timeout: float = 120.0

    def __post_init__(self):
        if self.retry_limit < 0:
            raise ValueError(f"retry_limit must be >= 0, got {self.retry_limit}")
        if self.backoff_base < 0:
            raise ValueError(f"backoff_base must be >= 0, got {self.backoff_base}")
        if not self.endpoint_url:
            raise ValueError("endpoint_url must not be empty")

    @property
    def completions_url(self) -> str:
        url = self.endpoint_url.rstrip('/')
        if url.endswith(CHAT_COMPLETIONS_PATH):
            return url
        return url + CHAT_COMPLETIONS_PATH


@dataclass(frozen=True)
class ChatExchange:
    """One request/response pair, as sent and received."""
    messages: List[Message]
    response_text: str
    params: GenerationParams
    usage: Optional[Dict[str, int]] = None

    def fingerprint(self) -> str:
        return messages_fingerprint(self.messages)

    def to_dict(self) -> dict:
        return {
            'messages': [dict(m) for m in self.messages],
            'params': self.params.to_dict(),
            'response_text': self.response_text,
            'usage': self.usage,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ChatExchange':
        messages = data['messages']
        validate_messages(messages)
        return cls(
            messages=[{'role': m['role'], 'content': m['content']} for m in messages],
            response_text=data['response_text'],
            params=GenerationParams.from_dict(data.get('params') or {}),
            usage=data.get('usage'),
        )


def canonical_messages(messages: Sequence[Message]) -> str:
    """Stable JSON text of a message list, used as replay key and fingerprint input."""
    return json.dumps(
        [{'role': m['role'], 'content': m['content']} for m in messages],
        sort_keys=True, ensure_ascii=False, separators=(',', ':'),
    )


def messages_fingerprint(messages: Sequence[Message]) -> str:
    return hashlib.sha256(canonical_messages(messages).encode('utf-8')).hexdigest()


def validate_messages(messages: Sequence[Message]):
    """Check a message list is well-formed.

    Raises:
        ValueError: on an empty list, an unknown role, non-string content,
            or a last message that is not from the user
    """
    if not messages:
        raise ValueError("messages must not be empty")
    for i, message in enumerate(messages):
        role = message.get('role')
        if role not in ROLES:
            raise ValueError(f"message #{i}: unknown role {role!r}")
        if not isinstance(message.get('content'), str):
            raise ValueError(f"message #{i}: content must be a string")
    if messages[-1]['role'] != 'user':
        raise ValueError("last message must have role 'user'")


def redact(text: str, secret: Optional[str]) -> str:
    """Replace every occurrence of secret in text."""
    if not secret:
        return text
    return text.replace(secret, REDACTED)


# =============================================================================
# Gateways
# =============================================================================

class ChatGateway:
    """Base gateway: validation and a thread-safe call counter.

    call_count counts logical completions (retries are not counted) and
    only ever increases.
    """

    def __init__(self):
        self._count_lock = threading.Lock()
        self._call_count = 0

    @property
    def call_count(self) -> int:
        with self._count_lock:
            return self._call_count

    def _count_call(self):
        with self._count_lock:
            self._call_count += 1

    def complete(self, messages: Sequence[Message], params: GenerationParams) -> ChatExchange:
        """Send messages and return the first choice text verbatim.

        Raises:
            ValueError: if messages are malformed
            GatewayError: on transport, auth, response or replay failures
        """
        validate_messages(messages)
        self._count_call()
        return self._complete([dict(m) for m in messages], params)

    def _complete(self, messages: List[Message], params: GenerationParams) -> ChatExchange:
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


class HttpGateway(ChatGateway):
    """Live OpenAI-compatible chat-completion endpoint.

    Transient failures (timeouts, connection errors, HTTP 429 and 5xx) are
    retried up to retry_limit times with delays backoff_base, 2*backoff_base,
    4*backoff_base... Other 4xx answers fail immediately.
    """

    def __init__(self, config: GatewayConfig,
                 transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__()
        self.config = config
        self._sleep = sleep
        self._client = httpx.Client(timeout=config.timeout, transport=transport)

    def _headers(self) -> Dict[str, str]:
        headers = {'Content-Type': 'application/json'}
        if self.config.auth_token:
            headers['Authorization'] = f"Bearer {self.config.auth_token}"
        return headers

    def _post_once(self, body: dict) -> dict:
        try:
            response = self._client.post(self.config.completions_url, json=body,
                                         headers=self._headers())
        except httpx.TransportError as e:
            raise _TransientFailure(redact(f"{type(e).__name__}: {e}", self.config.auth_token))

        status = response.status_code
        if status == 429 or status >= 500:
            raise _TransientFailure(f"HTTP {status}", status=status)
        if status >= 400:
            raise GatewayAuthError(
                f"HTTP {status} from {self.config.completions_url}: "
                f"{redact(response.text[:200], self.config.auth_token)}",
                status=status,
            )
        try:
            return response.json()
        except ValueError:
            raise MalformedResponseError(f"Response is not JSON (HTTP {status})", status=status)

    def _log_retry(self, retry_state):
        exc = retry_state.outcome.exception()
        delay = retry_state.next_action.sleep if retry_state.next_action else 0
        logger.warning(f"Gateway attempt {retry_state.attempt_number} failed ({exc}); "
                       f"retrying in {delay:.1f}s")

    def _complete(self, messages: List[Message], params: GenerationParams) -> ChatExchange:
        body = {
            'model': params.model_name,
            'messages': messages,
            'temperature': params.temperature,
            'max_tokens': params.max_output_tokens,
            'n': 1,
        }
        retrying = Retrying(
            stop=stop_after_attempt(self.config.retry_limit + 1),
            wait=wait_exponential(multiplier=self.config.backoff_base, min=0, max=3600),
            retry=retry_if_exception_type(_TransientFailure),
            sleep=self._sleep,
            before_sleep=self._log_retry,
            reraise=True,
        )
        try:
            payload = retrying(self._post_once, body)
        except _TransientFailure as e:
            raise GatewayTransportError(
                f"Gateway failed after {self.config.retry_limit + 1} attempts: {e}",
                status=e.status,
            )

        try:
            text = payload['choices'][0]['message']['content']
        except (KeyError, IndexError, TypeError):
            raise MalformedResponseError("Response has no choices[0].message.content")
        if not isinstance(text, str) or not text.strip():
            raise MalformedResponseError("Empty response text")

        usage = None
        raw_usage = payload.get('usage') if isinstance(payload, dict) else None
        if isinstance(raw_usage, dict):
            usage = {
                'input_tokens': raw_usage.get('prompt_tokens'),
                'output_tokens': raw_usage.get('completion_tokens'),
            }

        exchange = ChatExchange(messages=messages, response_text=text, params=params, usage=usage)
        logger.debug(f"Exchange {exchange.fingerprint()[:12]}: {len(messages)} messages, "
                     f"{len(text)} chars back")
        return exchange

    def close(self):
        self._client.close()


class TranscriptStore:
    """NDJSON transcript of exchanges; appends are serialized."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def load(self) -> List[ChatExchange]:
        """Read all exchanges.

        Raises:
            GatewayError: on a malformed line (names the line number)
        """
        exchanges = []
        with open(self.path, encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    exchanges.append(ChatExchange.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as e:
                    raise GatewayError(f"{self.path}:{line_no}: malformed transcript entry ({e})")
        return exchanges

    def append(self, exchange: ChatExchange):
        line = json.dumps(exchange.to_dict(), sort_keys=True, ensure_ascii=False)
        with self._lock:
            with open(self.path, 'a', encoding='utf-8') as f:
                f.write(line + '\n')
                f.flush()


class RecordingGateway(ChatGateway):
    """Forward to a live gateway and append every exchange to a transcript."""

    def __init__(self, live: ChatGateway, store: TranscriptStore):
        super().__init__()
        self.live = live
        self.store = store

    def _complete(self, messages, params):
        exchange = self.live.complete(messages, params)
        self.store.append(exchange)
        return exchange

    def close(self):
        self.live.close()


class ReplayGateway(ChatGateway):
    """Serve recorded exchanges by exact message list; never touches the network.

    When a message list was recorded more than once, the first recorded
    response is served.
    """

    def __init__(self, exchanges: Sequence[ChatExchange]):
        super().__init__()
        self._recorded: List[List[Message]] = []
        self._responses: Dict[str, ChatExchange] = {}
        for exchange in exchanges:
            key = canonical_messages(exchange.messages)
            if key not in self._responses:
                self._responses[key] = exchange
                self._recorded.append(exchange.messages)

    def __len__(self):
        return len(self._responses)

    def _complete(self, messages, params):
        recorded = self._responses.get(canonical_messages(messages))
        if recorded is None:
            index, message = self._first_divergence(messages)
            logger.debug(f"Replay miss at message #{index}")
            raise UnrecordedExchangeError(index, message)
        return ChatExchange(messages=messages, response_text=recorded.response_text,
                            params=params, usage=recorded.usage)

    def _first_divergence(self, messages: List[Message]):
        """Index and message where messages leave the closest recorded list."""
        best = 0
        for recorded in self._recorded:
            common = 0
            for ours, theirs in zip(messages, recorded):
                if ours['role'] != theirs['role'] or ours['content'] != theirs['content']:
                    break
                common += 1
            best = max(best, common)
        if best < len(messages):
            return best, messages[best]
        return best, None


def record_replay(mode: str, store_path: Path,
                  live: Optional[ChatGateway] = None) -> ChatGateway:
    """Build a transcript-backed gateway.

    Args:
        mode: 'record' (wrap live, append each exchange) or 'replay'
        store_path: Transcript store path
        live: Live gateway, required in record mode

    Returns:
        RecordingGateway or ReplayGateway

    Raises:
        ValueError: on an unknown mode or a missing live gateway
        FileNotFoundError: in replay mode when the store does not exist
    """
    store = TranscriptStore(store_path)
    if mode == 'record':
        if live is None:
            raise ValueError("record mode needs a live gateway")
        return RecordingGateway(live, store)
    if mode == 'replay':
        if not store.path.exists():
            raise FileNotFoundError(f"Replay store not found: {store.path}")
        exchanges = store.load()
        logger.info(f"Loaded {len(exchanges)} recorded exchanges from {store.path}")
        return ReplayGateway(exchanges)
    raise ValueError(f"Unknown gateway mode {mode!r} (expected record or replay)")
