"""Tests for the translation pipeline"""

import json
import threading
import time

import pytest

from datmt.core.config import ConfigError
from datmt.core.gateway import GatewayTransportError, record_replay
from datmt.core.generation import DemonstrationPair, Provenance
from datmt.core.mmr import FilterConfig
from datmt.core.pipeline import (
    FLAG_EMPTY_POOL_FALLBACK,
    FLAG_FILTERING_BYPASSED,
    Mode,
    PipelineConfig,
    accumulate_then_evaluate,
    run_batch,
    sweep_output_path,
    translate,
)
from datmt.core.pool import DemonstrationPool, SourceCorpus
from datmt.core.records import QueryItem, read_records

from .conftest import ScriptedGateway, default_respond, prompt_kind

QUERY = 'the cat sat on the mat'

FIXED = [DemonstrationPair(f'fixed source {i}', f'fixed target {i}', Provenance.FIXED)
         for i in range(4)]

CORPUS = ['the cat is black', 'a cat sat down', 'the mat is red', 'dogs bark at night',
          'the sun is hot', 'on the table']


def queries(count):
    words = ['alpha', 'bravo', 'charlie', 'delta', 'echo', 'foxtrot', 'golf', 'hotel']
    return [QueryItem(f'{words[i % len(words)]}{i} walks to the market today')
            for i in range(count)]


def make_config(prompts, mode, **kwargs):
    if mode in (Mode.FEW_SHOT_FIXED, Mode.DAT_FIXED):
        kwargs.setdefault('fixed_pairs', FIXED)
    if mode == Mode.DAT_ACCUMULATE:
        kwargs.setdefault('pool', DemonstrationPool())
    if mode == Mode.RETRIEVAL:
        kwargs.setdefault('sources', SourceCorpus(CORPUS))
    return PipelineConfig(mode=mode, prompts=prompts, **kwargs)


def final_prompt(gateway):
    return [p for p in gateway.prompts if prompt_kind(p) == 'query_translation'][-1]


class InFlightGateway(ScriptedGateway):
    """Scripted gateway that tracks how many calls run at once."""

    def __init__(self):
        super().__init__(default_respond)
        self.in_flight = 0
        self.max_in_flight = 0
        self._flight_lock = threading.Lock()

    def _complete(self, messages, params):
        with self._flight_lock:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            time.sleep(0.005)
            return super()._complete(messages, params)
        finally:
            with self._flight_lock:
                self.in_flight -= 1


class TestPipelineConfig:
    """Tests for PipelineConfig.validate."""

    @pytest.mark.parametrize('mode', [Mode.FEW_SHOT_FIXED, Mode.DAT_FIXED])
    def test_fixed_modes_need_pairs(self, prompts, mode):
        with pytest.raises(ConfigError):
            PipelineConfig(mode=mode, prompts=prompts).validate()

    def test_accumulate_needs_pool(self, prompts):
        with pytest.raises(ConfigError):
            PipelineConfig(mode=Mode.DAT_ACCUMULATE, prompts=prompts).validate()

    def test_retrieval_needs_sources(self, prompts):
        with pytest.raises(ConfigError):
            PipelineConfig(mode=Mode.RETRIEVAL, prompts=prompts).validate()

    def test_k_above_shots(self, prompts):
        config = make_config(prompts, Mode.DAT, filter=FilterConfig(m=10, k=6), shot_count=4)
        with pytest.raises(ConfigError):
            config.validate()

    def test_shots_above_top_n(self, prompts):
        config = make_config(prompts, Mode.DAT_ACCUMULATE, shot_count=8, top_n=4)
        with pytest.raises(ConfigError):
            config.validate()

    def test_invalid_config_writes_nothing(self, prompts, scripted_gateway, tmp_path):
        output = tmp_path / 'out.ndjson'
        with pytest.raises(ConfigError):
            run_batch(queries(2), PipelineConfig(mode=Mode.DAT_FIXED, prompts=prompts),
                      scripted_gateway, output)
        assert not output.exists()
        assert scripted_gateway.call_count == 0


class TestTranslate:
    """Tests for translating a single query."""

    @pytest.mark.parametrize('mode,calls', [
        (Mode.ZERO_SHOT, 1),
        (Mode.FEW_SHOT_FIXED, 1),
        (Mode.DAT, 6),
        (Mode.DAT_FIXED, 6),
        (Mode.DAT_ACCUMULATE, 1),
        (Mode.RETRIEVAL, 5),
    ])
    def test_call_counts(self, prompts, scripted_gateway, mode, calls):
        record = translate(QUERY, make_config(prompts, mode), scripted_gateway)
        assert record.ok, record.error
        assert scripted_gateway.call_count == calls
        assert len(record.exchanges) == calls

    def test_zero_shot_prompt(self, prompts, scripted_gateway):
        record = translate(QUERY, make_config(prompts, Mode.ZERO_SHOT), scripted_gateway)
        assert record.hypothesis == f'sw: {QUERY}'
        assert record.demonstrations_used == []
        assert 'Examples:' not in final_prompt(scripted_gateway)

    def test_dat_final_prompt_layout(self, prompts, scripted_gateway):
        record = translate(QUERY, make_config(prompts, Mode.DAT), scripted_gateway)
        lines = final_prompt(scripted_gateway).splitlines()
        start = lines.index('Examples:')
        examples = lines[start + 1:start + 5]
        for i, pair in enumerate(record.demonstrations_used, start=1):
            assert examples[i - 1] == f'{i}. English: {pair.source} ⇒ Swahili: {pair.target}'
        assert lines[start + 5] == ''
        assert lines[-1] == f'English: {QUERY} ⇒ Swahili:'
        assert record.flags == {FLAG_FILTERING_BYPASSED: False, 'shortfall': False}
        assert len(record.candidates) == 10
        assert record.selection_trace.selected == [
            record.candidates.index(p.source) for p in record.demonstrations_used]

    def test_dat_fixed_keeps_fixed_pairs_out_of_final_prompt(self, prompts, scripted_gateway):
        record = translate(QUERY, make_config(prompts, Mode.DAT_FIXED), scripted_gateway)
        assert 'fixed source' not in final_prompt(scripted_gateway)
        assert all(p.provenance == Provenance.GENERATED for p in record.demonstrations_used)
        target_prompts = [p for p in scripted_gateway.prompts
                          if prompt_kind(p) == 'target_generation']
        assert len(target_prompts) == 4
        assert all('fixed source 3' in p for p in target_prompts)

    def test_few_shot_uses_fixed_pairs(self, prompts, scripted_gateway):
        record = translate(QUERY, make_config(prompts, Mode.FEW_SHOT_FIXED, shot_count=2),
                           scripted_gateway)
        assert record.demonstrations_used == FIXED[:2]
        assert '2. English: fixed source 1' in final_prompt(scripted_gateway)

    def test_accumulate_empty_pool_falls_back(self, prompts, scripted_gateway):
        record = translate(QUERY, make_config(prompts, Mode.DAT_ACCUMULATE), scripted_gateway)
        assert record.ok
        assert record.flags[FLAG_EMPTY_POOL_FALLBACK]
        assert 'Examples:' not in final_prompt(scripted_gateway)

    def test_accumulate_uses_pool(self, prompts, scripted_gateway):
        pool = DemonstrationPool()
        pool.insert(DemonstrationPair('the cat sat', 'paka aliketi'))
        record = translate(QUERY, make_config(prompts, Mode.DAT_ACCUMULATE, pool=pool),
                           scripted_gateway)
        assert record.demonstrations_used == [
            DemonstrationPair('the cat sat', 'paka aliketi', Provenance.POOLED)]
        assert not record.flags[FLAG_EMPTY_POOL_FALLBACK]

    def test_retrieval_translates_corpus_sentences(self, prompts, scripted_gateway):
        record = translate(QUERY, make_config(prompts, Mode.RETRIEVAL), scripted_gateway)
        assert len(record.demonstrations_used) == 4
        assert all(p.source in CORPUS for p in record.demonstrations_used)
        assert all(p.target == f'sw: {p.source}' for p in record.demonstrations_used)

    def test_empty_query_is_a_record_error(self, prompts, scripted_gateway):
        record = translate('   ', make_config(prompts, Mode.DAT), scripted_gateway)
        assert not record.ok
        assert record.hypothesis is None
        assert scripted_gateway.call_count == 0

    def test_gateway_failure_is_a_record_error(self, prompts):
        def respond(kind, subject, content):
            raise GatewayTransportError('endpoint down', status=503)

        record = translate(QUERY, make_config(prompts, Mode.DAT), ScriptedGateway(respond))
        assert record.error.startswith('GatewayTransportError')
        assert record.to_dict()['hypothesis'] is None

    def test_record_dict_has_no_timing_by_default(self, prompts, scripted_gateway):
        record = translate(QUERY, make_config(prompts, Mode.ZERO_SHOT), scripted_gateway)
        assert 'timing' not in record.to_dict()
        assert 'total' in record.to_dict(include_timing=True)['timing']


class TestRunBatch:
    """Tests for run_batch."""

    def test_records_in_input_order(self, prompts, scripted_gateway, tmp_path):
        output = tmp_path / 'out.ndjson'
        items = queries(5) + [QueryItem('')]
        summary = run_batch(items, make_config(prompts, Mode.ZERO_SHOT), scripted_gateway, output)
        records = list(read_records(output))
        assert [r['index'] for r in records] == list(range(6))
        assert [r['query'] for r in records] == [q.text for q in items]
        assert summary.total == 6
        assert summary.failed == 1
        assert summary.failures[0]['index'] == 5
        assert summary.gateway_calls == 5

    def test_parallel_output_is_byte_identical(self, prompts, tmp_path):
        items = queries(60)
        serial_out = tmp_path / 'serial.ndjson'
        parallel_out = tmp_path / 'parallel.ndjson'
        run_batch(items, make_config(prompts, Mode.DAT), ScriptedGateway(default_respond),
                  serial_out)
        run_batch(items, make_config(prompts, Mode.DAT), ScriptedGateway(default_respond),
                  parallel_out, parallel=8)
        assert serial_out.read_bytes() == parallel_out.read_bytes()

    def test_replay_reproduces_recorded_run(self, prompts, tmp_path):
        store = tmp_path / 'transcript.jsonl'
        items = queries(4)
        live = ScriptedGateway(default_respond)
        recorder = record_replay('record', store, live=live)
        recorded = run_batch(items, make_config(prompts, Mode.DAT), recorder,
                             tmp_path / 'recorded.ndjson')
        assert recorded.gateway_calls == 4 * 6
        assert len(store.read_text(encoding='utf-8').splitlines()) == live.call_count

        replay = record_replay('replay', store)
        replayed = run_batch(items, make_config(prompts, Mode.DAT), replay,
                             tmp_path / 'replayed.ndjson', parallel=4)
        assert replayed.gateway_calls == recorded.gateway_calls
        assert ((tmp_path / 'recorded.ndjson').read_bytes()
                == (tmp_path / 'replayed.ndjson').read_bytes())

    @pytest.mark.parametrize('parallel', [1, 2, 3])
    def test_calls_in_flight_bounded_by_parallel(self, prompts, tmp_path, parallel):
        gateway = InFlightGateway()
        config = make_config(prompts, Mode.DAT, translate_workers=4)
        summary = run_batch(queries(6), config, gateway, tmp_path / 'out.ndjson',
                            parallel=parallel)
        assert summary.succeeded == 6
        assert gateway.call_count == 6 * 6
        assert 1 <= gateway.max_in_flight <= parallel

    def test_on_record_in_input_order(self, prompts, scripted_gateway, tmp_path):
        seen = []
        run_batch(queries(20), make_config(prompts, Mode.ZERO_SHOT), scripted_gateway,
                  tmp_path / 'out.ndjson', parallel=6, on_record=lambda r: seen.append(r.index))
        assert seen == list(range(20))

    def test_empty_batch_rejected(self, prompts, scripted_gateway, tmp_path):
        with pytest.raises(ValueError):
            run_batch([], make_config(prompts, Mode.ZERO_SHOT), scripted_gateway,
                      tmp_path / 'out.ndjson')

    def test_records_are_sorted_json(self, prompts, scripted_gateway, tmp_path):
        output = tmp_path / 'out.ndjson'
        run_batch([QueryItem('héllo wörld')], make_config(prompts, Mode.ZERO_SHOT),
                  scripted_gateway, output)
        line = output.read_text(encoding='utf-8').splitlines()[0]
        assert 'héllo wörld' in line
        assert list(json.loads(line)) == sorted(json.loads(line))


class TestAccumulation:
    """Tests for accumulate_then_evaluate."""

    def test_pool_grows_with_seed_pairs(self, prompts, scripted_gateway, tmp_path):
        items = queries(7)
        seeds, evals = items[:3], items[3:]
        pool = DemonstrationPool()
        config = make_config(prompts, Mode.DAT_ACCUMULATE, pool=pool)
        result = accumulate_then_evaluate(seeds, evals, config, scripted_gateway, pool,
                                          tmp_path / 'seed.ndjson', tmp_path / 'eval.ndjson')
        seed_records = list(read_records(tmp_path / 'seed.ndjson'))
        demonstrations = sum(len(r['demonstrations']) for r in seed_records)
        assert result.pool_size == len(pool) == demonstrations == 12
        assert result.pairs_inserted == 12
        assert result.duplicates_skipped == 0
        assert all(r['mode'] == 'dat' for r in seed_records)

        eval_records = list(read_records(tmp_path / 'eval.ndjson'))
        assert len(eval_records) == 4
        assert all(r['mode'] == 'dat_accumulate' for r in eval_records)
        assert all(r['demonstrations'] for r in eval_records)
        assert all(d['provenance'] == 'pooled' for r in eval_records for d in r['demonstrations'])
        assert result.eval_summary.gateway_calls == 4

    def test_insert_order_follows_seed_order(self, prompts, tmp_path):
        items = queries(5)
        pool = DemonstrationPool()
        config = make_config(prompts, Mode.DAT_ACCUMULATE, pool=pool)
        accumulate_then_evaluate(items[:4], items[4:], config, ScriptedGateway(default_respond),
                                 pool, tmp_path / 'seed.ndjson', tmp_path / 'eval.ndjson',
                                 parallel=4)
        origins = [e.origin_query for e in pool.entries]
        assert origins == [q.text for q in items[:4] for _ in range(4)]

    def test_zero_seeds_falls_back(self, prompts, scripted_gateway, tmp_path):
        pool = DemonstrationPool()
        config = make_config(prompts, Mode.DAT_ACCUMULATE, pool=pool)
        result = accumulate_then_evaluate([], queries(3), config, scripted_gateway, pool,
                                          tmp_path / 'seed.ndjson', tmp_path / 'eval.ndjson')
        assert result.seed_summary is None
        assert result.eval_summary.flag_counts == {FLAG_EMPTY_POOL_FALLBACK: 3}
        assert scripted_gateway.call_count == 3

    def test_sweep_points(self, prompts, scripted_gateway, tmp_path):
        items = queries(6)
        pool = DemonstrationPool()
        config = make_config(prompts, Mode.DAT_ACCUMULATE, pool=pool)
        eval_output = tmp_path / 'eval.ndjson'
        result = accumulate_then_evaluate(items[:3], items[3:], config, scripted_gateway, pool,
                                          tmp_path / 'seed.ndjson', eval_output,
                                          prefixes=[0, 1, 2], subset_count=3)
        assert [p.seed_count for p in result.sweep] == [0, 1, 2, 3]
        assert [p.pool_size for p in result.sweep] == [0, 4, 8, 12]
        assert result.sweep[-1].output_path == eval_output
        assert result.sweep[1].output_path == sweep_output_path(eval_output, 1)
        assert sweep_output_path(eval_output, 1).name == 'eval.seed1.ndjson'
        assert result.sweep[0].relevance_mean is None
        assert result.sweep[-1].relevance_mean is not None
        assert len(result.sweep[-1].subset_relevance) == 3

    def test_overlap_rejected(self, prompts, scripted_gateway, tmp_path):
        items = queries(3)
        pool = DemonstrationPool()
        config = make_config(prompts, Mode.DAT_ACCUMULATE, pool=pool)
        with pytest.raises(ValueError):
            accumulate_then_evaluate(items, items[:1], config, scripted_gateway, pool,
                                     tmp_path / 'seed.ndjson', tmp_path / 'eval.ndjson')

    def test_blank_queries_fail_per_record(self, prompts, scripted_gateway, tmp_path):
        items = queries(3)
        seeds = [items[0], QueryItem(''), items[1]]
        evals = [QueryItem(''), items[2]]
        pool = DemonstrationPool()
        config = make_config(prompts, Mode.DAT_ACCUMULATE, pool=pool)
        result = accumulate_then_evaluate(seeds, evals, config, scripted_gateway, pool,
                                          tmp_path / 'seed.ndjson', tmp_path / 'eval.ndjson')
        assert result.pool_size == 8
        assert result.seed_summary.failed == 1
        assert result.eval_summary.failed == 1
        eval_records = list(read_records(tmp_path / 'eval.ndjson'))
        assert eval_records[0]['error'] is not None
        assert eval_records[1]['error'] is None
