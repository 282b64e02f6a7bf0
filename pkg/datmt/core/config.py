"""
Central configuration for datmt.

Resolution order (highest wins):
    1. Command-line flags
    2. Environment (DATMT_ENDPOINT_URL, DATMT_MODEL, DATMT_AUTH_TOKEN)
    3. Config file (--config, or DATMT_CONFIG)
    4. Built-in defaults below (the published experimental setup)

Config file format (one setting per line):
    endpoint_url=http://localhost:8000/v1
    m=10
    k=4
    lambda=1.0
    # Comments start with #

The auth token is only ever read from the environment. It is never accepted
from a config file or a flag, and never written to a manifest.
"""

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

# Environment variables
ENV_CONFIG = "DATMT_CONFIG"
ENV_ENDPOINT_URL = "DATMT_ENDPOINT_URL"
ENV_MODEL = "DATMT_MODEL"
ENV_AUTH_TOKEN = "DATMT_AUTH_TOKEN"

# Generation (temperature 0.1 during decoding)
DEFAULT_ENDPOINT_URL = "http://localhost:8000/v1"
DEFAULT_MODEL = "llama-3.1-8b-instruct"
DEFAULT_TEMPERATURE = 0.1
DEFAULT_MAX_OUTPUT_TOKENS = 1024
DEFAULT_RETRY_LIMIT = 3
DEFAULT_BACKOFF_BASE = 1.0  # seconds
DEFAULT_TIMEOUT = 120.0  # seconds

# Demonstration generation: 10 candidates, 4 kept, 4-shot final prompt
DEFAULT_M = 10
DEFAULT_K = 4
DEFAULT_LAMBDA = 1.0
DEFAULT_SHOTS = 4
DEFAULT_FIXED_COUNT = 4

# Pool retrieval (Okapi defaults)
DEFAULT_TOP_N = 100
DEFAULT_BM25_K1 = 1.5
DEFAULT_BM25_B = 0.75

DEFAULT_SOURCE_LANG = "English"
DEFAULT_TARGET_LANG = "Swahili"
DEFAULT_PARALLEL = 1


class ConfigError(Exception):
    """Raised when configuration is invalid (CLI exit status 2)."""

    def __init__(self, message: str, key: str = None):
        super().__init__(message)
        self.key = key


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise ValueError("must be >= 1")
    return number


def _non_negative_int(value: str) -> int:
    number = int(value)
    if number < 0:
        raise ValueError("must be >= 0")
    return number


def _non_negative_float(value: str) -> float:
    number = float(value)
    if math.isnan(number) or number < 0:
        raise ValueError("must be >= 0")
    return number


def _positive_float(value: str) -> float:
    number = float(value)
    if math.isnan(number) or number <= 0:
        raise ValueError("must be > 0")
    return number


def _text(value: str) -> str:
    value = str(value).strip()
    if not value:
        raise ValueError("must not be empty")
    return value


def _optional_text(value: str) -> Optional[str]:
    value = str(value).strip()
    return value or None


# Config key -> (Settings attribute, converter)
KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    'endpoint_url': ('endpoint_url', _text),
    'model_name': ('model_name', _text),
    'temperature': ('temperature', _non_negative_float),
    'max_output_tokens': ('max_output_tokens', _positive_int),
    'retry_limit': ('retry_limit', _non_negative_int),
    'backoff_base': ('backoff_base', _non_negative_float),
    'timeout': ('timeout', _positive_float),
    'm': ('m', _positive_int),
    'k': ('k', _positive_int),
    'lambda': ('lambda_', _non_negative_float),
    'shots': ('shots', _positive_int),
    'fixed_count': ('fixed_count', _positive_int),
    'top_n': ('top_n', _positive_int),
    'bm25_k1': ('bm25_k1', _non_negative_float),
    'bm25_b': ('bm25_b', _non_negative_float),
    'source_lang': ('source_lang', _text),
    'target_lang': ('target_lang', _text),
    'template_dir': ('template_dir', _optional_text),
    'parallel': ('parallel', _positive_int),
}

# Environment variable -> config key
ENV_KEYS = {
    ENV_ENDPOINT_URL: 'endpoint_url',
    ENV_MODEL: 'model_name',
}


@dataclass
class Settings:
    """Fully resolved settings for one run."""
    endpoint_url: str = DEFAULT_ENDPOINT_URL
    model_name: str = DEFAULT_MODEL
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    retry_limit: int = DEFAULT_RETRY_LIMIT
    backoff_base: float = DEFAULT_BACKOFF_BASE
    timeout: float = DEFAULT_TIMEOUT
    m: int = DEFAULT_M
    k: int = DEFAULT_K
    lambda_: float = DEFAULT_LAMBDA
    shots: int = DEFAULT_SHOTS
    fixed_count: int = DEFAULT_FIXED_COUNT
    top_n: int = DEFAULT_TOP_N
    bm25_k1: float = DEFAULT_BM25_K1
    bm25_b: float = DEFAULT_BM25_B
    source_lang: str = DEFAULT_SOURCE_LANG
    target_lang: str = DEFAULT_TARGET_LANG
    template_dir: Optional[str] = None
    parallel: int = DEFAULT_PARALLEL
    auth_token: Optional[str] = field(default=None, repr=False)
    # config key -> 'default' | 'file' | 'env' | 'flag'
    sources: Dict[str, str] = field(default_factory=dict, repr=False)

    def validate(self):
        """Check cross-field invariants.

        Raises:
            ConfigError: on the first violated invariant
        """
        if self.k > self.m:
            raise ConfigError(f"k ({self.k}) must not exceed m ({self.m})", key='k')
        if self.shots > self.top_n:
            raise ConfigError(f"shots ({self.shots}) must not exceed top_n ({self.top_n})", key='top_n')
        if not 0 <= self.bm25_b <= 1:
            raise ConfigError(f"bm25_b must be within [0, 1], got {self.bm25_b}", key='bm25_b')

    def overrides(self) -> Dict[str, Dict[str, Any]]:
        """Settings that differ from the built-in defaults, with their origin."""
        defaults = Settings()
        result = {}
        for key, (attr, _) in KEYS.items():
            value = getattr(self, attr)
            if value != getattr(defaults, attr):
                result[key] = {'value': value, 'source': self.sources.get(key, 'default')}
        return result

    def snapshot(self) -> Dict[str, Any]:
        """Resolved settings as a plain dict, without secret material."""
        data = {key: getattr(self, attr) for key, (attr, _) in KEYS.items()}
        data['auth_token_set'] = bool(self.auth_token)
        return data

    def filter_config(self):
        """FilterConfig (m, k, lambda) for demonstration filtering."""
        from .mmr import FilterConfig
        return FilterConfig(m=self.m, k=self.k, lambda_=self.lambda_)

    def generation_params(self):
        """GenerationParams for every gateway call of the run."""
        from .gateway import GenerationParams
        return GenerationParams(
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            model_name=self.model_name,
        )

    def gateway_config(self):
        """GatewayConfig for the live HTTP gateway."""
        from .gateway import GatewayConfig
        return GatewayConfig(
            endpoint_url=self.endpoint_url,
            auth_token=self.auth_token,
            retry_limit=self.retry_limit,
            backoff_base=self.backoff_base,
            timeout=self.timeout,
        )


def read_config_file(config_path: Path) -> Dict[str, str]:
    """Read a key=value config file.

    Args:
        config_path: Path to the config file

    Returns:
        Dict of raw (unconverted) values keyed by config key

    Raises:
        ConfigError: if the file is unreadable, a line is malformed,
            or a key is unknown
    """
    config = {}
    try:
        with open(config_path, encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith('#'):
                    continue
                if '=' not in line:
                    raise ConfigError(f"{config_path}:{line_no}: expected key=value, got {line!r}")
                key, value = line.split('=', 1)
                key = key.strip()
                if key == 'auth_token':
                    raise ConfigError(
                        f"{config_path}:{line_no}: auth_token is only read from ${ENV_AUTH_TOKEN}",
                        key=key,
                    )
                if key not in KEYS:
                    raise ConfigError(f"{config_path}:{line_no}: unknown key {key!r}", key=key)
                config[key] = value.strip()
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"Cannot read config file {config_path}: {e}")
    return config


def _apply(settings: Settings, key: str, raw: Any, source: str):
    attr, convert = KEYS[key]
    try:
        value = convert(raw) if isinstance(raw, str) else convert(str(raw))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for {key} ({source}): {raw!r} ({e})", key=key)
    setattr(settings, attr, value)
    settings.sources[key] = source


def resolve_settings(config_path: Optional[Path] = None,
                     flags: Optional[Mapping[str, Any]] = None,
                     environ: Optional[Mapping[str, str]] = None) -> Settings:
    """Resolve settings from defaults, config file, environment and flags.

    Args:
        config_path: Explicit config file (falls back to $DATMT_CONFIG)
        flags: Config key -> value from the command line; None values are unset
        environ: Environment mapping (defaults to os.environ)

    Returns:
        Validated Settings with a per-key source map

    Raises:
        ConfigError: on unreadable files, bad values or violated invariants
    """
    environ = os.environ if environ is None else environ
    settings = Settings()
    settings.sources = {key: 'default' for key in KEYS}

    if config_path is None and environ.get(ENV_CONFIG):
        config_path = Path(environ[ENV_CONFIG])
    if config_path is not None:
        for key, raw in read_config_file(Path(config_path)).items():
            _apply(settings, key, raw, 'file')

    for env_name, key in ENV_KEYS.items():
        if environ.get(env_name):
            _apply(settings, key, environ[env_name], 'env')
    settings.auth_token = environ.get(ENV_AUTH_TOKEN) or None

    for key, raw in (flags or {}).items():
        if raw is None:
            continue
        if key not in KEYS:
            raise ConfigError(f"Unknown setting {key!r}", key=key)
        _apply(settings, key, raw, 'flag')

    settings.validate()
    return settings
