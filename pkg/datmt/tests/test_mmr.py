"""Tests for relevant-yet-diverse candidate selection"""

import random

import pytest

from datmt.core.mmr import (
    FilterConfig,
    NoCandidatesError,
    SelectionTrace,
    first_pick_is_max_relevance,
    mmr_select,
)
from datmt.core.textngram import alpha


def greedy_oracle(query, candidates, k, lam):
    """Step-by-step greedy selection, written out literally."""
    relevance = [alpha(query, c) for c in candidates]
    pairwise = [[alpha(xj, xi) for xi in candidates] for xj in candidates]
    selected = []
    while len(selected) < min(k, len(candidates)):
        best, best_value = None, None
        for i in range(len(candidates)):
            if i in selected:
                continue
            if selected:
                redundancy = 0.0
                for j in selected:
                    redundancy += pairwise[j][i]
                value = relevance[i] - (lam / len(selected)) * redundancy
            else:
                value = relevance[i]
            if best_value is None or value > best_value:
                best, best_value = i, value
        selected.append(best)
    return selected


def random_instance(rng):
    alphabet = 'abcdef'
    query = tuple(rng.choice(alphabet) for _ in range(rng.randint(1, 8)))
    candidates = []
    for _ in range(rng.randint(1, 8)):
        candidates.append(tuple(rng.choice(alphabet) for _ in range(rng.randint(1, 8))))
    return query, candidates


class TestFilterConfig:
    """Tests for FilterConfig validation."""

    def test_defaults(self):
        config = FilterConfig()
        assert (config.m, config.k, config.lambda_) == (10, 4, 1.0)
        assert config.filtering_enabled

    def test_m_equals_k_disables_filtering(self):
        assert not FilterConfig(m=4, k=4).filtering_enabled

    @pytest.mark.parametrize('kwargs', [
        {'m': 3, 'k': 4},
        {'m': 0, 'k': 0},
        {'k': 0},
        {'lambda_': -0.1},
        {'lambda_': float('nan')},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            FilterConfig(**kwargs)


class TestMmrSelect:
    """Tests for mmr_select."""

    def test_empty_candidates(self):
        with pytest.raises(NoCandidatesError):
            mmr_select(('a',), [], FilterConfig())

    def test_shortfall(self):
        trace = mmr_select(('a', 'b'), [('a',), ('b',)], FilterConfig(m=10, k=4))
        assert sorted(trace.selected) == [0, 1]
        assert trace.shortfall
        assert trace.requested == 4

    def test_first_pick_is_most_relevant(self):
        query = ('the', 'cat', 'sat', 'on', 'the', 'mat')
        candidates = [('a', 'dog'), ('the', 'cat', 'sat', 'on', 'a', 'mat'), ('the', 'cat')]
        trace = mmr_select(query, candidates, FilterConfig(m=3, k=1))
        assert trace.selected == [1]
        assert trace.step_scores[0].diversity == 0.0
        assert trace.step_scores[0].objective == trace.step_scores[0].relevance

    def test_diversity_beats_duplicate_relevance(self):
        query = ('a', 'b', 'c', 'd', 'e')
        near_copy = ('a', 'b', 'c', 'd', 'x')
        candidates = [near_copy, near_copy + ('y',), ('e', 'q', 'r')]
        trace = mmr_select(query, candidates, FilterConfig(m=3, k=2, lambda_=1.0))
        assert trace.selected == [0, 2]

    def test_ties_go_to_lowest_index(self):
        candidates = [('z',), ('y',), ('w',)]
        trace = mmr_select(('a',), candidates, FilterConfig(m=3, k=3))
        assert trace.selected == [0, 1, 2]

    def test_step_scores_are_consistent(self):
        rng = random.Random(7)
        query, candidates = random_instance(rng)
        config = FilterConfig(m=max(len(candidates), 4), k=min(4, len(candidates)), lambda_=0.5)
        trace = mmr_select(query, candidates, config)
        for step, index in enumerate(trace.selected):
            score = trace.step_scores[step]
            assert score.relevance == pytest.approx(alpha(query, candidates[index]))
            assert score.objective == pytest.approx(score.relevance + 0.5 * score.diversity)

    def test_trace_round_trip(self):
        trace = mmr_select(('a', 'b'), [('a',), ('b',), ('c',)], FilterConfig(m=3, k=2))
        assert SelectionTrace.from_dict(trace.to_dict()) == trace

    def test_randomized_against_oracle(self):
        rng = random.Random(2024)
        for _ in range(500):
            query, candidates = random_instance(rng)
            k = rng.randint(1, 4)
            lam = rng.choice([0.0, 0.5, 1.0])
            config = FilterConfig(m=max(k, len(candidates)), k=k, lambda_=lam)
            trace = mmr_select(query, candidates, config)

            assert trace.selected == greedy_oracle(query, candidates, k, lam)
            assert len(set(trace.selected)) == len(trace.selected) == min(k, len(candidates))

            # first pick never depends on lambda
            expected_first = greedy_oracle(query, candidates, 1, 0.0)[0]
            assert trace.selected[0] == expected_first
            for other in (0.0, 0.5, 1.0, 3.0):
                assert first_pick_is_max_relevance(query, candidates, other) == expected_first

            # lambda = 0 reduces to top-k relevance, ties by index
            if lam == 0.0:
                relevance = [alpha(query, c) for c in candidates]
                order = sorted(range(len(candidates)), key=lambda i: (-relevance[i], i))
                assert trace.selected == order[:min(k, len(candidates))]
