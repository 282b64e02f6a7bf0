"""
Tokenization and recall-based n-gram relevance.

    R_n(q, x)  = |ngrams_n(q) ∩ ngrams_n(x)| / |ngrams_n(q)|   (multiset, clipped)
    alpha(q, x) = (R_1 + R_2 + R_3 + R_4) / 4

Recall is relative to the first argument, so alpha is not symmetric.
An order with no n-grams in q contributes 0 and alpha still divides by 4:
very short queries are penalized uniformly instead of renormalized.
"""

import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Sequence, Tuple

import regex

# Identifier stored in pool headers; bump if the tokenization rule changes
TOKENIZER_ID = "lower-nfc-alnum-v1"

MAX_ORDER = 4

# Runs of letters, combining marks and digits; everything else separates
_TOKEN_RE = regex.compile(r"[\p{L}\p{M}\p{N}]+")

TokenSequence = Tuple[str, ...]
NGram = Tuple[str, ...]


@dataclass(frozen=True)
class NGramProfile:
    """Multiset of order-n n-grams of one token sequence."""
    order: int
    counts: Counter

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def tokenize(text: str) -> TokenSequence:
    """Lowercase and split on maximal runs of non-alphanumeric characters.

    Args:
        text: Raw sentence (may be empty)

    Returns:
        Tuple of tokens; tokenizing ' '.join(result) reproduces it
    """
    normalized = unicodedata.normalize('NFC', text.lower())
    return tuple(_TOKEN_RE.findall(normalized))


def _check_order(n: int):
    if not 1 <= n <= MAX_ORDER:
        raise ValueError(f"n-gram order must be within 1..{MAX_ORDER}, got {n}")


def ngram_profile(seq: Sequence[str], n: int) -> NGramProfile:
    """Sliding-window n-grams of seq with multiplicities.

    Sequences shorter than n yield an empty profile.

    Raises:
        ValueError: if n is outside 1..4
    """
    _check_order(n)
    seq = tuple(seq)
    counts = Counter(seq[i:i + n] for i in range(len(seq) - n + 1))
    return NGramProfile(order=n, counts=counts)


def recall_n(q: Sequence[str], x: Sequence[str], n: int) -> float:
    """Clipped share of q's order-n n-grams that also occur in x.

    Returns 0.0 when q has no n-grams of order n.
    """
    q_profile = ngram_profile(q, n)
    total = q_profile.total
    if total == 0:
        return 0.0
    x_profile = ngram_profile(x, n)
    matched = sum((q_profile.counts & x_profile.counts).values())
    return matched / total


def alpha(q: Sequence[str], x: Sequence[str]) -> float:
    """Average of recall_n over orders 1..4, always divided by 4."""
    return sum(recall_n(q, x, n) for n in range(1, MAX_ORDER + 1)) / MAX_ORDER


def alpha_text(query: str, candidate: str) -> float:
    """alpha over raw strings."""
    return alpha(tokenize(query), tokenize(candidate))
