"""
Greedy relevant-yet-diverse selection of k candidates out of m.

At each step the candidate maximizing

    alpha(q, x) - (lambda / |S|) * sum(alpha(s, x) for s in S)

is appended to the selection S. With S empty the penalty is 0, so the first
pick is always the most relevant candidate whatever lambda is. Ties go to
the lowest candidate index.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .textngram import TokenSequence, alpha

logger = logging.getLogger(__name__)


class NoCandidatesError(ValueError):
    """Raised when there is nothing to filter."""

    def __init__(self):
        super().__init__("no candidates to filter")


@dataclass(frozen=True)
class FilterConfig:
    """Filtering inputs: generate m, keep k, penalize redundancy by lambda."""
    m: int = 10
    k: int = 4
    lambda_: float = 1.0

    def __post_init__(self):
        if self.m < 1 or self.k < 1:
            raise ValueError(f"m and k must be positive (m={self.m}, k={self.k})")
        if self.k > self.m:
            raise ValueError(f"k ({self.k}) must not exceed m ({self.m})")
        if not self.lambda_ >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_}")

    @property
    def filtering_enabled(self) -> bool:
        """m == k disables filtering: every parsed candidate is used."""
        return self.m != self.k

    def to_dict(self) -> dict:
        return {'m': self.m, 'k': self.k, 'lambda': self.lambda_}


@dataclass(frozen=True)
class StepScore:
    """Scores of the candidate chosen at one selection step."""
    relevance: float
    diversity: float  # -(1/|S|) * sum(alpha(s, x)); 0.0 on the first step
    objective: float

    def to_dict(self) -> dict:
        return {'relevance': self.relevance, 'diversity': self.diversity,
                'objective': self.objective}


@dataclass
class SelectionTrace:
    """Selected candidate indices in pick order, with per-step scores."""
    selected: List[int] = field(default_factory=list)
    step_scores: List[StepScore] = field(default_factory=list)
    requested: int = 0
    shortfall: bool = False  # fewer distinct candidates than requested

    def to_dict(self) -> dict:
        return {
            'selected': list(self.selected),
            'step_scores': [s.to_dict() for s in self.step_scores],
            'requested': self.requested,
            'shortfall': self.shortfall,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SelectionTrace':
        return cls(
            selected=list(data.get('selected', [])),
            step_scores=[StepScore(**s) for s in data.get('step_scores', [])],
            requested=data.get('requested', 0),
            shortfall=data.get('shortfall', False),
        )


def mmr_select(query: TokenSequence, candidates: Sequence[TokenSequence],
               config: FilterConfig) -> SelectionTrace:
    """Select up to config.k candidates, relevant to query and mutually diverse.

    Args:
        query: Tokenized query
        candidates: Tokenized, already deduplicated candidates
        config: Filtering parameters (k, lambda)

    Returns:
        SelectionTrace with min(k, len(candidates)) distinct indices

    Raises:
        NoCandidatesError: if candidates is empty
    """
    if not candidates:
        raise NoCandidatesError()

    count = len(candidates)
    relevance = np.array([alpha(query, c) for c in candidates], dtype=np.float64)
    # pairwise[j, i] = alpha(x_j, x_i): recall of selected x_j found in candidate x_i
    pairwise = np.array([[alpha(xj, xi) for xi in candidates] for xj in candidates],
                        dtype=np.float64)

    target = min(config.k, count)
    trace = SelectionTrace(requested=config.k, shortfall=count < config.k)
    if trace.shortfall:
        logger.info(f"Only {count} candidates for k={config.k}; selecting all")

    redundancy = np.zeros(count, dtype=np.float64)
    available = np.ones(count, dtype=bool)

    for _ in range(target):
        picked = len(trace.selected)
        if picked:
            objective = relevance - (config.lambda_ / picked) * redundancy
        else:
            objective = relevance.copy()
        # argmax returns the first maximum, i.e. the lowest index on ties
        best = int(np.argmax(np.where(available, objective, -np.inf)))

        diversity = -float(redundancy[best]) / picked if picked else 0.0
        trace.selected.append(best)
        trace.step_scores.append(StepScore(
            relevance=float(relevance[best]),
            diversity=diversity,
            objective=float(objective[best]),
        ))
        available[best] = False
        redundancy += pairwise[best]

    return trace


def first_pick_is_max_relevance(query: TokenSequence,
                                candidates: Sequence[TokenSequence],
                                lambda_: float = 1.0) -> int:
    """Index of the first selection; the argmax of alpha(query, .) for any lambda."""
    config = FilterConfig(m=max(len(candidates), 1), k=1, lambda_=lambda_)
    return mmr_select(query, candidates, config).selected[0]
