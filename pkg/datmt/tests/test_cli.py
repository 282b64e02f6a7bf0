"""Tests for CLI"""

import importlib
import json

import pytest

from datmt.cli.main import create_parser, main
from datmt.core.gateway import ChatExchange, GenerationParams
from datmt.core.pool import DemonstrationPool
from datmt.core.templates import PromptSet

from .conftest import ScriptedGateway, default_respond


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ('DATMT_CONFIG', 'DATMT_ENDPOINT_URL', 'DATMT_MODEL', 'DATMT_AUTH_TOKEN'):
        monkeypatch.delenv(name, raising=False)


def write_store(path, answers):
    """Transcript store answering zero-shot prompts: {query: response}."""
    prompts = PromptSet.load()
    with open(path, 'w', encoding='utf-8') as f:
        for query, response in answers.items():
            exchange = ChatExchange(
                messages=prompts.query_translation(query, 'English', 'Swahili'),
                response_text=response, params=GenerationParams())
            f.write(json.dumps(exchange.to_dict()) + '\n')
    return path


@pytest.fixture
def scripted_cli(monkeypatch):
    """Route CLI gateway calls to a fresh scripted gateway per command."""
    gateways = []

    def fake_open_gateway(args, settings):
        gateways.append(ScriptedGateway(default_respond))
        return gateways[-1]

    # datmt.cli re-exports main(), shadowing the submodule in dotted lookups
    monkeypatch.setattr(importlib.import_module('datmt.cli.main'), 'open_gateway', fake_open_gateway)
    return gateways


def write_queries(path, lines):
    path.write_text(''.join(f'{line}\n' for line in lines), encoding='utf-8')
    return path


SENTENCES = [f'{word} walks to the market today'
             for word in ('alpha', 'bravo', 'charlie', 'delta', 'echo', 'foxtrot')]


def write_records(path, records):
    with open(path, 'w', encoding='utf-8') as f:
        for i, (query, sources) in enumerate(records):
            f.write(json.dumps({
                'schema_version': 1, 'index': i, 'query': query, 'mode': 'dat',
                'hypothesis': 'jibu', 'error': None,
                'demonstrations': [{'source': s, 'target': f'sw {s}', 'provenance': 'generated'}
                                   for s in sources],
            }) + '\n')
    return path


class TestParser:
    """Tests for argument parser."""

    def test_version_flag(self):
        parser = create_parser()
        with pytest.raises(SystemExit):
            parser.parse_args(['--version'])

    def test_translate_defaults(self):
        args = create_parser().parse_args(['translate', 'The cat sat.'])
        assert args.command == 'translate'
        assert args.query == 'The cat sat.'
        assert args.mode == 'dat'
        assert args.m is None
        assert args.lambda_ is None

    def test_translate_flags(self):
        args = create_parser().parse_args(
            ['translate', '--mode', 'zero-shot', '--m', '4', '--k', '4', '--lambda', '0.5',
             '--replay', 'run.jsonl', 'Hello'])
        assert args.mode == 'zero-shot'
        assert (args.m, args.k, args.lambda_) == (4, 4, 0.5)
        assert str(args.replay) == 'run.jsonl'

    def test_record_and_replay_exclusive(self):
        with pytest.raises(SystemExit):
            create_parser().parse_args(['translate', '--record', 'a', '--replay', 'b', 'x'])

    def test_unknown_mode(self):
        with pytest.raises(SystemExit):
            create_parser().parse_args(['translate', '--mode', 'magic', 'x'])

    def test_batch_command(self):
        args = create_parser().parse_args(
            ['batch', 'queries.txt', '-o', 'out.jsonl', '--parallel', '8',
             '--split', 'seed:500,eval:512', '--sweep', '100,300'])
        assert args.command == 'batch'
        assert args.parallel == 8
        assert args.split == 'seed:500,eval:512'
        assert args.subsets == 5

    def test_pool_query(self):
        args = create_parser().parse_args(['pool', 'query', '--pool', 'p.jsonl', '--q', 'hi'])
        assert args.pool_command == 'query'
        assert (args.k, args.top_n) == (4, 100)

    def test_report_command(self):
        args = create_parser().parse_args(['report', 'dat.jsonl', '--quality-cmd', 'score'])
        assert args.command == 'report'
        assert args.quality_cmd == 'score'


class TestTranslateCommand:
    """Tests for datmt translate."""

    def test_zero_shot_replay(self, tmp_path, capsys):
        store = write_store(tmp_path / 'run.jsonl', {'Hello there': 'Habari yako'})
        status = main(['translate', '--mode', 'zero-shot', '--replay', str(store), 'Hello there'])
        assert status == 0
        assert capsys.readouterr().out == 'Habari yako\n'

    def test_output_and_manifest(self, tmp_path):
        store = write_store(tmp_path / 'run.jsonl', {'Hello there': 'Habari yako'})
        output = tmp_path / 'record.jsonl'
        status = main(['--quiet', 'translate', '--mode', 'zero-shot', '--replay', str(store),
                       '-o', str(output), 'Hello there'])
        assert status == 0
        record = json.loads(output.read_text(encoding='utf-8'))
        assert record['hypothesis'] == 'Habari yako'
        assert 'timing' not in record
        manifest = json.loads((tmp_path / 'record.jsonl.manifest.json').read_text(encoding='utf-8'))
        assert manifest['gateway_mode'] == 'replay'
        assert manifest['mode'] == 'zero_shot'

    def test_replay_miss_fails(self, tmp_path, capsys):
        store = write_store(tmp_path / 'run.jsonl', {'Hello there': 'Habari yako'})
        status = main(['translate', '--mode', 'zero-shot', '--replay', str(store), 'Goodbye'])
        assert status == 1
        assert 'Unrecorded' in capsys.readouterr().err

    def test_missing_replay_store(self, tmp_path):
        status = main(['translate', '--mode', 'zero-shot', '--replay',
                       str(tmp_path / 'absent.jsonl'), 'Hello'])
        assert status == 2

    def test_fixed_mode_without_pairs(self):
        assert main(['translate', '--mode', 'dat-fixed', 'Hello']) == 2

    def test_k_above_m(self):
        assert main(['translate', '--m', '3', '--k', '4', 'Hello']) == 2

    def test_bad_config_file(self, tmp_path):
        config = tmp_path / 'datmt.conf'
        config.write_text('auth_token=secret\n', encoding='utf-8')
        assert main(['--config', str(config), 'translate', 'Hello']) == 2

    def test_unknown_option(self):
        assert main(['translate', '--no-such-flag', 'Hello']) == 2

    def test_no_command(self, capsys):
        assert main([]) == 2

    def test_filtering_bypass_note(self, capsys, scripted_cli):
        assert main(['translate', '--m', '4', '--k', '4', SENTENCES[0]]) == 0
        captured = capsys.readouterr()
        assert captured.out == f'sw: {SENTENCES[0]}\n'
        assert 'filtering bypassed' in captured.err

    def test_filtering_bypass_note_quiet(self, capsys, scripted_cli):
        assert main(['--quiet', 'translate', '--m', '4', '--k', '4', SENTENCES[0]]) == 0
        assert 'filtering bypassed' not in capsys.readouterr().err


class TestBatchCommand:
    """Tests for datmt batch."""

    def test_missing_input(self, tmp_path):
        status = main(['batch', str(tmp_path / 'absent.txt'), '-o', str(tmp_path / 'out.jsonl')])
        assert status == 2

    def test_zero_shot_batch(self, tmp_path):
        queries = tmp_path / 'queries.txt'
        queries.write_text('Hello there\nGood morning\tHabari za asubuhi\n', encoding='utf-8')
        store = write_store(tmp_path / 'run.jsonl',
                            {'Hello there': 'Habari yako', 'Good morning': 'Habari za asubuhi'})
        output = tmp_path / 'out.jsonl'
        status = main(['--quiet', 'batch', str(queries), '-o', str(output), '--mode', 'zero-shot',
                       '--replay', str(store), '--parallel', '2', '--no-progress'])
        assert status == 0
        records = [json.loads(line) for line in output.read_text(encoding='utf-8').splitlines()]
        assert [r['hypothesis'] for r in records] == ['Habari yako', 'Habari za asubuhi']
        assert records[1]['reference'] == 'Habari za asubuhi'
        summary = json.loads((tmp_path / 'out.jsonl.summary.json').read_text(encoding='utf-8'))
        assert summary['succeeded'] == 2
        assert summary['gateway_calls'] == 2
        assert (tmp_path / 'out.jsonl.manifest.json').exists()

    def test_split_needs_accumulate_mode(self, tmp_path):
        queries = tmp_path / 'queries.txt'
        queries.write_text('a\nb\n', encoding='utf-8')
        status = main(['batch', str(queries), '-o', str(tmp_path / 'out.jsonl'),
                       '--split', 'seed:1,eval:1'])
        assert status == 2

    def test_split_larger_than_input(self, tmp_path):
        queries = tmp_path / 'queries.txt'
        queries.write_text('a\nb\n', encoding='utf-8')
        status = main(['batch', str(queries), '-o', str(tmp_path / 'out.jsonl'),
                       '--mode', 'dat-accumulate', '--split', 'seed:2,eval:1'])
        assert status == 2

    def test_sweep_needs_split(self, tmp_path):
        queries = tmp_path / 'queries.txt'
        queries.write_text('a\n', encoding='utf-8')
        status = main(['batch', str(queries), '-o', str(tmp_path / 'out.jsonl'),
                       '--sweep', '1'])
        assert status == 2

    def test_split_with_sweep(self, tmp_path, scripted_cli):
        queries = write_queries(tmp_path / 'queries.txt', SENTENCES[:5])
        pool = tmp_path / 'pool.jsonl'
        output = tmp_path / 'out.ndjson'
        status = main(['--quiet', 'batch', str(queries), '-o', str(output),
                       '--mode', 'dat-accumulate', '--pool', str(pool),
                       '--split', 'seed:3,eval:2', '--sweep', '1,2', '--no-progress'])
        assert status == 0

        manifest = json.loads((tmp_path / 'out.ndjson.manifest.json').read_text(encoding='utf-8'))
        seed_part, eval_part = manifest['split']
        assert (seed_part['role'], seed_part['start'], seed_part['end']) == ('seed', 0, 3)
        assert (eval_part['role'], eval_part['start'], eval_part['end']) == ('eval', 3, 5)

        seed_records = [json.loads(line) for line in
                        (tmp_path / 'out.seed.ndjson').read_text(encoding='utf-8').splitlines()]
        seed_pairs = sum(len(r['demonstrations']) for r in seed_records)
        assert seed_pairs == 12
        assert len(DemonstrationPool.load(pool)) == seed_pairs

        for name in ('out.eval.ndjson', 'out.eval.seed1.ndjson', 'out.eval.seed2.ndjson'):
            assert len((tmp_path / name).read_text(encoding='utf-8').splitlines()) == 2
        summary = json.loads((tmp_path / 'out.ndjson.summary.json').read_text(encoding='utf-8'))
        assert summary['pool_size'] == 12
        assert [p['seed_count'] for p in summary['sweep']] == [1, 2, 3]
        assert [p['pool_size'] for p in summary['sweep']] == [4, 8, 12]

    def test_split_with_blank_lines(self, tmp_path, scripted_cli):
        queries = tmp_path / 'queries.txt'
        queries.write_text('the cat sat\n\nthe dog ran\n\n', encoding='utf-8')
        output = tmp_path / 'out.ndjson'
        status = main(['--quiet', 'batch', str(queries), '-o', str(output),
                       '--mode', 'dat-accumulate', '--split', 'seed:2,eval:2', '--no-progress'])
        assert status == 0
        eval_records = [json.loads(line) for line in
                        (tmp_path / 'out.eval.ndjson').read_text(encoding='utf-8').splitlines()]
        assert eval_records[0]['error'] is None
        assert eval_records[1]['error'] is not None

    def test_split_with_shared_query(self, tmp_path, scripted_cli):
        queries = write_queries(tmp_path / 'queries.txt', [SENTENCES[0], SENTENCES[0]])
        status = main(['--quiet', 'batch', str(queries), '-o', str(tmp_path / 'out.ndjson'),
                       '--mode', 'dat-accumulate', '--split', 'seed:1,eval:1', '--no-progress'])
        assert status == 2

    def test_parallel_output_is_byte_identical(self, tmp_path, scripted_cli):
        queries = write_queries(tmp_path / 'queries.txt', SENTENCES)
        outputs = []
        for parallel in ('1', '8'):
            output = tmp_path / f'out{parallel}.ndjson'
            assert main(['--quiet', 'batch', str(queries), '-o', str(output),
                         '--parallel', parallel, '--no-progress']) == 0
            outputs.append(output.read_bytes())
        assert outputs[0] == outputs[1]
        assert len(outputs[0].splitlines()) == len(SENTENCES)


class TestPoolCommand:
    """Tests for datmt pool."""

    def test_insert_stats_verify_query(self, tmp_path, capsys):
        pool = tmp_path / 'pool.jsonl'
        pairs = tmp_path / 'pairs.tsv'
        pairs.write_text('The cat sat.\tPaka aliketi.\nThe dog ran.\tMbwa alikimbia.\n',
                         encoding='utf-8')
        assert main(['pool', 'insert', '--pool', str(pool), str(pairs)]) == 0
        assert main(['pool', 'insert', '--pool', str(pool),
                     '--source', 'The cat sat.', '--target', 'Paka aliketi.']) == 0
        capsys.readouterr()

        assert main(['pool', 'stats', '--pool', str(pool), '--json']) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats['size'] == 2

        assert main(['pool', 'verify', '--pool', str(pool)]) == 0
        assert 'OK' in capsys.readouterr().out

        assert main(['pool', 'query', '--pool', str(pool), '--q', 'the cat', '--k', '1',
                     '--json']) == 0
        results = json.loads(capsys.readouterr().out)
        assert [r['target'] for r in results] == ['Paka aliketi.']

    def test_empty_pool(self, tmp_path, capsys):
        pool = tmp_path / 'pool.jsonl'
        assert main(['pool', 'compact', '--pool', str(pool)]) == 0
        capsys.readouterr()
        assert main(['pool', 'stats', '--pool', str(pool), '--json']) == 0
        assert json.loads(capsys.readouterr().out)['size'] == 0
        assert main(['pool', 'verify', '--pool', str(pool)]) == 0
        assert main(['pool', 'query', '--pool', str(pool), '--q', 'anything']) == 0
        assert 'empty' in capsys.readouterr().err

    def test_missing_pool_store(self, tmp_path):
        assert main(['pool', 'stats', '--pool', str(tmp_path / 'absent.jsonl')]) == 2

    def test_export(self, tmp_path):
        pool = tmp_path / 'pool.jsonl'
        main(['pool', 'insert', '--pool', str(pool), '--source', 'a b', '--target', 'c d'])
        out = tmp_path / 'pairs.tsv'
        assert main(['pool', 'export', '--pool', str(pool), '--out', str(out)]) == 0
        assert out.read_text(encoding='utf-8') == 'a b\tc d\n'

    def test_insert_needs_pairs(self, tmp_path):
        assert main(['pool', 'insert', '--pool', str(tmp_path / 'pool.jsonl')]) == 2

    def test_new_store_uses_configured_bm25(self, tmp_path):
        config = tmp_path / 'datmt.conf'
        config.write_text('bm25_k1=2.0\nbm25_b=0.5\n', encoding='utf-8')
        pool = tmp_path / 'pool.jsonl'
        assert main(['--config', str(config), 'pool', 'insert', '--pool', str(pool),
                     '--source', 'a b', '--target', 'c d']) == 0
        header = json.loads(pool.read_text(encoding='utf-8').splitlines()[0])
        assert header['bm25'] == {'k1': 2.0, 'b': 0.5}
        loaded = DemonstrationPool.load(pool)
        assert (loaded.index.k1, loaded.index.b) == (2.0, 0.5)


class TestReportCommand:
    """Tests for datmt report."""

    def test_table(self, tmp_path, capsys):
        records = write_records(tmp_path / 'dat.jsonl', [
            ('the cat sat on the mat', ['the cat sat on the mat'] * 4),
            ('the cat sat on the mat', ['the cat sat on the mat'] * 4),
        ])
        assert main(['report', str(records)]) == 0
        out = capsys.readouterr().out
        header, _, row = out.splitlines()[:3]
        assert header.split() == ['Records', 'Relev.', 'Uni.', 'Qual.']
        assert row.split() == ['2', '100.0', '100.0', 'n/a']

    def test_json_and_output(self, tmp_path, capsys):
        records = write_records(tmp_path / 'dat.jsonl', [('a b c d', ['a b c d', 'e f g h'])])
        output = tmp_path / 'report.json'
        assert main(['report', str(records), '--json', '-o', str(output)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed == json.loads(output.read_text(encoding='utf-8'))
        assert printed['relevance']['score'] == 50.0

    def test_failing_scorer_still_reports(self, tmp_path, capsys):
        records = write_records(tmp_path / 'dat.jsonl', [('a b c d', ['a b c d'])])
        status = main(['report', str(records), '--quality-cmd', 'definitely-not-a-scorer-binary'])
        captured = capsys.readouterr()
        assert status == 0
        assert 'failed' in captured.out
        assert 'scorer failed' in captured.err

    def test_malformed_record_file(self, tmp_path):
        path = tmp_path / 'dat.jsonl'
        path.write_text('not json\n', encoding='utf-8')
        assert main(['report', str(path)]) == 1

    def test_missing_record_file(self, tmp_path):
        assert main(['report', str(tmp_path / 'absent.jsonl')]) == 2
