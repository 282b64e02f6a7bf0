"""
Main CLI entry point for datmt

Commands:
- datmt translate   translate one query
- datmt batch       translate a query file (optionally seed/eval accumulation)
- datmt pool        insert / query / verify / stats / compact / export a pool
- datmt report      Relevance, Uniformity, Quality and length report of a record file

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .. import __version__
from ..core.config import ConfigError, Settings, resolve_settings
from ..core.gateway import ChatGateway, GatewayError, HttpGateway, record_replay
from ..core.generation import DemonstrationPair, LanguagePair, Provenance
from ..core.pipeline import (
    Mode,
    PipelineConfig,
    accumulate_then_evaluate,
    run_batch,
    translate,
)
from ..core.pool import DemonstrationPool, PoolError, SourceCorpus
from ..core.records import (
    RecordFileError,
    RunManifest,
    parse_split,
    read_fixed_pairs,
    read_queries,
    read_records,
    read_sentences,
    write_json_atomic,
)
from ..core.templates import PromptSet, TemplateError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# CLI spelling -> pipeline mode
MODES = {
    'zero-shot': Mode.ZERO_SHOT,
    'few-shot': Mode.FEW_SHOT_FIXED,
    'dat': Mode.DAT,
    'dat-fixed': Mode.DAT_FIXED,
    'dat-accumulate': Mode.DAT_ACCUMULATE,
    'retrieval': Mode.RETRIEVAL,
}

# argparse dest -> config key
SETTING_FLAGS = {
    'endpoint_url': 'endpoint_url',
    'model': 'model_name',
    'temperature': 'temperature',
    'max_output_tokens': 'max_output_tokens',
    'retry_limit': 'retry_limit',
    'timeout': 'timeout',
    'm': 'm',
    'k': 'k',
    'lambda_': 'lambda',
    'shots': 'shots',
    'fixed_count': 'fixed_count',
    'top_n': 'top_n',
    'source_lang': 'source_lang',
    'target_lang': 'target_lang',
    'template_dir': 'template_dir',
    'parallel': 'parallel',
}


def create_parser() -> argparse.ArgumentParser:
    """Create the main argument parser with all commands."""

    parser = argparse.ArgumentParser(
        prog='datmt',
        description='LLM translation with self-generated, relevant and diverse demonstrations',
        epilog='Use "datmt <command> --help" for command-specific help.'
    )
    parser.add_argument('--version', '-V', action='version', version=f'datmt {__version__}')
    parser.add_argument('--verbose', '-v', action='store_true', help='Verbose output')
    parser.add_argument('--quiet', '-q', action='store_true', help='Quiet output')
    parser.add_argument('--nocolor', action='store_true', help='Disable colored output')
    parser.add_argument('--config', metavar='FILE', type=Path,
                        help='key=value config file (default: $DATMT_CONFIG)')

    # Parent parser for display options
    display_parent = argparse.ArgumentParser(add_help=False)
    display_parent.add_argument('--json', action='store_true', help='JSON output for scripting')

    # Parent parser for gateway options
    gateway_parent = argparse.ArgumentParser(add_help=False)
    gateway_group = gateway_parent.add_argument_group('gateway')
    gateway_group.add_argument('--endpoint-url', metavar='URL',
                               help='Chat-completion endpoint (env: DATMT_ENDPOINT_URL)')
    gateway_group.add_argument('--model', metavar='NAME', help='Model name (env: DATMT_MODEL)')
    gateway_group.add_argument('--temperature', type=float, metavar='T',
                               help='Decoding temperature (default: 0.1)')
    gateway_group.add_argument('--max-output-tokens', type=int, metavar='N')
    gateway_group.add_argument('--retry-limit', type=int, metavar='N',
                               help='Retries on timeouts, 429 and 5xx (default: 3)')
    gateway_group.add_argument('--timeout', type=float, metavar='SECONDS')
    transcript = gateway_group.add_mutually_exclusive_group()
    transcript.add_argument('--record', metavar='STORE', type=Path,
                            help='Append every exchange to this transcript store')
    transcript.add_argument('--replay', metavar='STORE', type=Path,
                            help='Serve exchanges from this transcript store (no network)')

    # Parent parser for pipeline options
    pipeline_parent = argparse.ArgumentParser(add_help=False)
    pipeline_group = pipeline_parent.add_argument_group('pipeline')
    pipeline_group.add_argument('--mode', choices=list(MODES), default='dat',
                                help='Demonstration strategy (default: dat)')
    pipeline_group.add_argument('--m', type=int, metavar='M',
                                help='Source candidates to generate (default: 10)')
    pipeline_group.add_argument('--k', type=int, metavar='K',
                                help='Candidates kept after filtering (default: 4; m = k disables filtering)')
    pipeline_group.add_argument('--lambda', dest='lambda_', type=float, metavar='L',
                                help='Redundancy penalty weight (default: 1.0)')
    pipeline_group.add_argument('--shots', type=int, metavar='N',
                                help='Demonstrations in the final prompt (default: 4)')
    pipeline_group.add_argument('--fixed-pairs', type=Path, metavar='TSV',
                                help='source<TAB>target file of fixed pairs')
    pipeline_group.add_argument('--fixed-count', type=int, metavar='N',
                                help='Fixed pairs taken from the file (default: 4)')
    pipeline_group.add_argument('--pool', type=Path, metavar='FILE',
                                help='Demonstration pool store (dat-accumulate)')
    pipeline_group.add_argument('--sources', type=Path, metavar='FILE',
                                help='Monolingual sentence file (retrieval mode)')
    pipeline_group.add_argument('--top-n', type=int, metavar='N',
                                help='BM25 shortlist size (default: 100)')
    pipeline_group.add_argument('--source-lang', metavar='NAME')
    pipeline_group.add_argument('--target-lang', metavar='NAME')
    pipeline_group.add_argument('--template-dir', metavar='DIR',
                                help='Directory with prompt templates')

    subparsers = parser.add_subparsers(dest='command', title='commands', metavar='<command>')

    # =========================================================================
    # translate
    # =========================================================================
    translate_parser = subparsers.add_parser(
        'translate',
        help='Translate one query',
        parents=[display_parent, gateway_parent, pipeline_parent],
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description='''Translate one query and print the hypothesis.

Examples:
  datmt translate "The cat sat on the mat."
  datmt translate --mode zero-shot --replay run.jsonl "Hello"
  datmt translate --m 4 --k 4 --json "No filtering ablation"
'''
    )
    translate_parser.add_argument('query', help='Source-language sentence')
    translate_parser.add_argument('--output', '-o', type=Path, metavar='FILE',
                                  help='Also write the record (NDJSON) and its manifest')

    # =========================================================================
    # batch
    # =========================================================================
    batch_parser = subparsers.add_parser(
        'batch',
        help='Translate a query file',
        parents=[display_parent, gateway_parent, pipeline_parent],
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description='''Translate every line of a query file (query or query<TAB>reference).

Records are written in input order whatever --parallel is.

Examples:
  datmt batch devtest.txt -o dat.jsonl --parallel 8
  datmt batch devtest.tsv -o acc.jsonl --mode dat-accumulate --pool pool.jsonl \\
      --split seed:500,eval:512 --sweep 100,300,500
'''
    )
    batch_parser.add_argument('input', type=Path, help='Query file')
    batch_parser.add_argument('--output', '-o', type=Path, required=True, metavar='FILE',
                              help='Record file (NDJSON)')
    batch_parser.add_argument('--parallel', type=int, metavar='N',
                              help='Queries in flight (default: 1)')
    batch_parser.add_argument('--split', metavar='SEED:N,EVAL:N',
                              help='Accumulate a pool over the first part, evaluate on the second')
    batch_parser.add_argument('--sweep', metavar='N,N,...',
                              help='Also evaluate with pools built from these seed prefixes')
    batch_parser.add_argument('--subsets', type=int, default=5, metavar='N',
                              help='Eval subsets for relevance variability (default: 5)')
    batch_parser.add_argument('--no-progress', action='store_true', help='No progress bar')

    # =========================================================================
    # pool
    # =========================================================================
    pool_parent = argparse.ArgumentParser(add_help=False)
    pool_parent.add_argument('--pool', type=Path, required=True, metavar='FILE',
                             help='Pool store')

    pool_parser = subparsers.add_parser(
        'pool',
        help='Manage a demonstration pool',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description='''Inspect and maintain a demonstration pool.

Examples:
  datmt pool insert --pool pool.jsonl pairs.tsv
  datmt pool query --pool pool.jsonl --q "The cat sat" --k 4
  datmt pool verify --pool pool.jsonl
'''
    )
    pool_subparsers = pool_parser.add_subparsers(dest='pool_command', metavar='<subcommand>')

    pool_insert = pool_subparsers.add_parser('insert', help='Insert source<TAB>target pairs',
                                             parents=[pool_parent, display_parent])
    pool_insert.add_argument('pairs', type=Path, nargs='?', help='TSV file of pairs')
    pool_insert.add_argument('--source', help='Source side of a single pair')
    pool_insert.add_argument('--target', help='Target side of a single pair')
    pool_insert.add_argument('--origin-query', help='Query the pair was generated for')

    pool_query = pool_subparsers.add_parser('query', help='R-BM25 retrieval with scores',
                                            parents=[pool_parent, display_parent])
    pool_query.add_argument('--q', required=True, metavar='TEXT', help='Query text')
    pool_query.add_argument('--k', type=int, default=4, help='Pairs to return (default: 4)')
    pool_query.add_argument('--top-n', type=int, default=100,
                            help='BM25 shortlist size (default: 100)')

    pool_subparsers.add_parser('verify', help='Compare incremental index with a rebuild',
                               parents=[pool_parent, display_parent])
    pool_subparsers.add_parser('stats', help='Size and length distribution',
                               parents=[pool_parent, display_parent])
    pool_subparsers.add_parser('compact', help='Rewrite the store in canonical form',
                               parents=[pool_parent])
    pool_export = pool_subparsers.add_parser('export', help='Write pairs as a TSV parallel corpus',
                                             parents=[pool_parent])
    pool_export.add_argument('--out', type=Path, required=True, metavar='FILE')

    # =========================================================================
    # report
    # =========================================================================
    report_parser = subparsers.add_parser(
        'report',
        help='Metrics over a record file',
        parents=[display_parent],
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description='''Relevance, Uniformity, Quality and output-length report.

The quality scorer reads {"source": ..., "target": ...} JSON lines on stdin
and writes one score (or {"score": ...}) per line.

Examples:
  datmt report dat.jsonl
  datmt report dat.jsonl --quality-cmd "python score.py" -o report.json
'''
    )
    report_parser.add_argument('records', type=Path, help='Record file (NDJSON)')
    report_parser.add_argument('--quality-cmd', metavar='CMD',
                               help='External pair scorer (JSON lines in/out)')
    report_parser.add_argument('--output', '-o', type=Path, metavar='FILE',
                               help='Also write the report as JSON')

    return parser


# =============================================================================
# Shared helpers
# =============================================================================

def _say(args, message: str):
    if not getattr(args, 'quiet', False):
        print(message)


def _fail(message: str, status: int = EXIT_FAILURE) -> int:
    from . import colors
    print(colors.error(f"Error: {message}"), file=sys.stderr)
    return status


def resolve_args_settings(args) -> Settings:
    """Resolve settings from --config, environment and flags present on args."""
    flags = {key: getattr(args, dest) for dest, key in SETTING_FLAGS.items() if hasattr(args, dest)}
    return resolve_settings(config_path=args.config, flags=flags)


def gateway_mode(args) -> str:
    if getattr(args, 'replay', None):
        return 'replay'
    if getattr(args, 'record', None):
        return 'record'
    return 'live'


def open_gateway(args, settings: Settings) -> ChatGateway:
    """Live, recording or replaying gateway, depending on flags.

    Raises:
        ConfigError: replay store missing
    """
    mode = gateway_mode(args)
    if mode == 'replay':
        try:
            return record_replay('replay', args.replay)
        except FileNotFoundError as e:
            raise ConfigError(str(e), key='replay')
    live = HttpGateway(settings.gateway_config())
    if mode == 'record':
        return record_replay('record', args.record, live=live)
    return live


def _require_file(path: Optional[Path], what: str):
    if path is not None and not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")


def build_pipeline_config(args, settings: Settings, pool: Optional[DemonstrationPool] = None) -> PipelineConfig:
    """PipelineConfig from resolved settings and file flags.

    Args:
        args: Parsed arguments
        settings: Resolved settings
        pool: Already opened pool (accumulation); loaded from --pool otherwise

    Raises:
        ConfigError: missing files or mode requirements
        TemplateError: invalid templates
    """
    mode = MODES[args.mode]

    fixed_pairs = None
    if args.fixed_pairs:
        _require_file(args.fixed_pairs, "Fixed pairs file")
        try:
            fixed_pairs = read_fixed_pairs(args.fixed_pairs, settings.fixed_count)
        except RecordFileError as e:
            raise ConfigError(str(e), key='fixed_pairs')

    if pool is None and args.pool and mode == Mode.DAT_ACCUMULATE:
        _require_file(args.pool, "Pool store")
        pool = DemonstrationPool.load(args.pool)

    sources = None
    if args.sources:
        _require_file(args.sources, "Source corpus")
        sources = SourceCorpus(read_sentences(args.sources), k1=settings.bm25_k1, b=settings.bm25_b)

    config = PipelineConfig(
        mode=mode,
        prompts=PromptSet.load(settings.template_dir),
        filter=settings.filter_config(),
        langs=LanguagePair(source=settings.source_lang, target=settings.target_lang),
        params=settings.generation_params(),
        fixed_pairs=fixed_pairs,
        pool=pool,
        sources=sources,
        shot_count=settings.shots,
        top_n=settings.top_n,
        translate_workers=settings.parallel,
    )
    config.validate()
    return config


def build_manifest(command: str, args, settings: Settings, **extra) -> RunManifest:
    return RunManifest(
        command=command,
        settings=settings.snapshot(),
        overrides=settings.overrides(),
        mode=MODES[args.mode].value,
        gateway_mode=gateway_mode(args),
        template_dir=settings.template_dir,
        transcript_path=str(args.replay or args.record or '') or None,
        pool_path=str(args.pool) if args.pool else None,
        **extra,
    )


# =============================================================================
# translate
# =============================================================================

def cmd_translate(args) -> int:
    """Handle translate command."""
    from . import colors

    settings = resolve_args_settings(args)
    config = build_pipeline_config(args, settings)
    if args.output:
        build_manifest('translate', args, settings, output_paths=[str(args.output)]).write(args.output)

    with open_gateway(args, settings) as gateway:
        record = translate(args.query, config, gateway)

    if args.output:
        with open(args.output, 'w', encoding='utf-8') as f:
            f.write(json.dumps(record.to_dict(), sort_keys=True, ensure_ascii=False) + '\n')

    if args.json:
        from . import display
        display.print_json(record.to_dict(include_timing=True))
    elif record.ok:
        print(record.hypothesis)
        if record.flags.get('filtering_bypassed') and not args.quiet:
            print(colors.warning("Note: filtering bypassed (m == k)"), file=sys.stderr)

    if not record.ok:
        print(colors.error(f"Error: {record.error}"), file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# =============================================================================
# batch
# =============================================================================

def _progress_bar(args, total: int):
    from tqdm import tqdm
    return tqdm(total=total, unit='query', file=sys.stderr,
                disable=args.quiet or args.json or args.no_progress)


def _split_output(output: Path, name: str) -> Path:
    return output.with_name(f"{output.stem}.{name}{output.suffix}")


def cmd_batch(args) -> int:
    """Handle batch command."""
    from . import colors, display

    settings = resolve_args_settings(args)
    _require_file(args.input, "Input file")
    try:
        queries = read_queries(args.input)
    except RecordFileError as e:
        raise ConfigError(str(e))
    if not queries:
        raise ConfigError(f"No queries in {args.input}")

    if args.split:
        return _batch_accumulate(args, settings, queries)
    if args.sweep:
        raise ConfigError("--sweep needs --split")

    config = build_pipeline_config(args, settings)
    summary_path = args.output.with_name(args.output.name + '.summary.json')
    build_manifest('batch', args, settings, input_path=str(args.input),
                   output_paths=[str(args.output), str(summary_path)]).write(args.output)

    with open_gateway(args, settings) as gateway, _progress_bar(args, len(queries)) as bar:
        summary = run_batch(queries, config, gateway, args.output, parallel=settings.parallel,
                            progress=bar.update)
    write_json_atomic(summary_path, summary.to_dict())

    if args.json:
        display.print_json(summary.to_dict())
    else:
        _say(args, f"{colors.count(summary.succeeded)}/{summary.total} translated, "
                   f"{colors.count(summary.gateway_calls)} gateway calls "
                   f"({display.format_duration(summary.wall_time)})")
        for flag, n in sorted(summary.flag_counts.items()):
            _say(args, colors.warning(f"  {flag}: {n}"))
        if summary.failed:
            _say(args, colors.error(f"  {summary.failed} failed (see {args.output})"))
    return EXIT_OK


def _batch_accumulate(args, settings: Settings, queries) -> int:
    """--split: grow the pool on the seed part, evaluate on the eval part."""
    from . import colors, display

    if MODES[args.mode] != Mode.DAT_ACCUMULATE:
        raise ConfigError("--split needs --mode dat-accumulate", key='mode')
    try:
        parts = parse_split(args.split)
        prefixes = [int(p) for p in args.sweep.split(',')] if args.sweep else None
    except ValueError as e:
        raise ConfigError(f"Invalid --split/--sweep: {e}")
    if len(parts) != 2:
        raise ConfigError("--split needs exactly two parts (seed and eval)")
    (seed_name, seed_size), (eval_name, eval_size) = parts
    if seed_size + eval_size > len(queries):
        raise ConfigError(f"--split needs {seed_size + eval_size} queries, "
                          f"{args.input} has {len(queries)}")
    if prefixes and any(p < 0 or p > seed_size for p in prefixes):
        raise ConfigError(f"--sweep prefixes must be within 0..{seed_size}")

    seed_queries = queries[:seed_size]
    eval_queries = queries[seed_size:seed_size + eval_size]
    seed_output = _split_output(args.output, seed_name)
    eval_output = _split_output(args.output, eval_name)
    summary_path = args.output.with_name(args.output.name + '.summary.json')

    pool = DemonstrationPool.open(args.pool, k1=settings.bm25_k1, b=settings.bm25_b) \
        if args.pool else DemonstrationPool(k1=settings.bm25_k1, b=settings.bm25_b)
    try:
        config = build_pipeline_config(args, settings, pool=pool)
        split = [
            {'name': seed_name, 'role': 'seed', 'start': 0, 'end': seed_size,
             'size': seed_size, 'output': str(seed_output)},
            {'name': eval_name, 'role': 'eval', 'start': seed_size,
             'end': seed_size + eval_size, 'size': eval_size, 'output': str(eval_output)},
        ]
        build_manifest('batch', args, settings, input_path=str(args.input), split=split,
                       output_paths=[str(seed_output), str(eval_output), str(summary_path)]
                       ).write(args.output)

        runs = len(set(prefixes or [])) + 1
        with open_gateway(args, settings) as gateway, \
                _progress_bar(args, seed_size + eval_size * runs) as bar:
            try:
                result = accumulate_then_evaluate(
                    seed_queries, eval_queries, config, gateway, pool,
                    seed_output=seed_output, eval_output=eval_output,
                    parallel=settings.parallel, prefixes=prefixes, subset_count=args.subsets,
                    progress=bar.update,
                )
            except ValueError as e:
                raise ConfigError(f"--split: {e}")
    finally:
        pool.close()
    write_json_atomic(summary_path, result.to_dict())

    if args.json:
        display.print_json(result.to_dict())
        return EXIT_OK

    _say(args, f"Pool: {colors.count(result.pool_size)} pairs "
               f"({result.pairs_inserted} inserted, {result.duplicates_skipped} duplicates)")
    rows = [(p.seed_count, p.pool_size, f"{p.summary.succeeded}/{p.summary.total}",
             display.format_metric(p.relevance_mean),
             display.format_metric(p.relevance_std))
            for p in result.sweep]
    for line in display.format_table(['Seeds', 'Pool', 'OK', 'Relev.', 'Std'], rows):
        _say(args, line)
    if result.persist_failures:
        _say(args, colors.warning(f"{result.persist_failures} pool writes failed"))
    return EXIT_OK


# =============================================================================
# pool
# =============================================================================

def _pool_insert(args, pool: DemonstrationPool) -> int:
    from . import colors

    pairs: List[DemonstrationPair] = []
    if args.pairs:
        _require_file(args.pairs, "Pairs file")
        try:
            pairs = [DemonstrationPair(p.source, p.target, Provenance.GENERATED)
                     for p in read_fixed_pairs(args.pairs, count=sys.maxsize)]
        except RecordFileError as e:
            raise ConfigError(str(e))
    if args.source or args.target:
        if not (args.source and args.target):
            raise ConfigError("--source and --target go together")
        pairs.append(DemonstrationPair(args.source, args.target, Provenance.GENERATED))
    if not pairs:
        raise ConfigError("Nothing to insert (give a TSV file or --source/--target)")

    inserted = duplicates = 0
    for pair in pairs:
        try:
            result = pool.insert(pair, origin_query=args.origin_query)
        except ValueError as e:
            logger.warning(f"Skipped pair: {e}")
            continue
        if result.duplicate:
            duplicates += 1
        else:
            inserted += 1
    _say(args, f"{colors.count(inserted)} inserted, {duplicates} duplicates, "
               f"pool size {colors.count(len(pool))}")
    return EXIT_OK


def _pool_query(args, pool: DemonstrationPool) -> int:
    from . import colors, display

    if args.k < 1 or args.k > args.top_n:
        raise ConfigError(f"--k must be within 1..--top-n ({args.top_n})")
    results = pool.retrieve_scored(args.q, args.top_n, args.k)
    if not results:
        print(colors.warning("Pool is empty: no pairs retrieved"), file=sys.stderr)

    if args.json:
        display.print_json([{'seq': r.entry.insert_sequence, 'source': r.entry.pair.source,
                             'target': r.entry.pair.target, 'bm25': r.bm25, 'alpha': r.alpha}
                            for r in results])
        return EXIT_OK
    width = max(20, (display.get_terminal_width() - 30) // 2)
    rows = [(i, f"{r.bm25:.3f}", f"{r.alpha:.3f}", display.truncate(r.entry.pair.source, width),
             display.truncate(r.entry.pair.target, width))
            for i, r in enumerate(results, start=1)]
    if rows:
        for line in display.format_table(['#', 'BM25', 'alpha', 'Source', 'Target'], rows,
                                         align_right=[True, True, True, False, False]):
            print(line)
    return EXIT_OK


def _pool_verify(args, pool: DemonstrationPool) -> int:
    from . import colors, display

    result = pool.verify()
    if args.json:
        display.print_json({'ok': result.ok, 'total_documents': result.total_documents,
                            'problems': result.problems})
    elif result.ok:
        _say(args, colors.success(f"OK: index matches rebuild ({result.total_documents} documents)"))
    else:
        for problem in result.problems:
            print(colors.error(f"  {problem}"))
    return EXIT_OK if result.ok else EXIT_FAILURE


def _pool_stats(args, pool: DemonstrationPool) -> int:
    from . import display

    stats = pool.stats()
    if args.json:
        display.print_json(stats.to_dict())
        return EXIT_OK
    print(f"\nPool: {args.pool}")
    print(f"Size:       {stats.size:,}")
    print(f"Vocabulary: {stats.vocabulary_size:,}")
    print(f"Source length (tokens): mean {stats.average_source_length:.1f}")
    if stats.source_length_quantiles:
        print("  " + ", ".join(f"{name} {value:.0f}"
                               for name, value in stats.source_length_quantiles.items()))
    print(f"Target length (tokens): mean {stats.average_target_length:.1f}")
    print()
    return EXIT_OK


def cmd_pool(args) -> int:
    """Handle pool subcommands."""
    command = args.pool_command
    if command is None:
        raise ConfigError("Missing pool subcommand (insert, query, verify, stats, compact, export)")

    if command in ('insert', 'compact'):
        # a new store takes BM25 parameters from the config file; existing ones keep their header
        settings = resolve_settings(config_path=args.config)
        with DemonstrationPool.open(args.pool, k1=settings.bm25_k1, b=settings.bm25_b) as pool:
            if command == 'insert':
                return _pool_insert(args, pool)
            pool.compact()
            _say(args, f"Compacted {len(pool)} entries")
            return EXIT_OK

    _require_file(args.pool, "Pool store")
    pool = DemonstrationPool.load(args.pool)
    if command == 'query':
        return _pool_query(args, pool)
    if command == 'verify':
        return _pool_verify(args, pool)
    if command == 'stats':
        return _pool_stats(args, pool)
    if command == 'export':
        count = pool.export_tsv(args.out)
        _say(args, f"Exported {count} pairs to {args.out}")
        return EXIT_OK
    raise ConfigError(f"Unknown pool subcommand {command!r}")


# =============================================================================
# report
# =============================================================================

def format_report(report) -> List[str]:
    """Aligned Relev./Uni./Qual. table followed by length statistics."""
    from . import display

    lines = display.format_table(
        ['Records', 'Relev.', 'Uni.', 'Qual.'],
        [(report.total, display.format_metric(report.relevance.score),
          display.format_metric(report.uniformity.score), report.quality.render())],
    )
    lengths = report.lengths
    lines.append("")
    lines.append(f"  Excluded: relevance {report.relevance.excluded}, "
                 f"uniformity {report.uniformity.excluded}, failed records {report.failed}")
    if lengths.count:
        lines.append(f"  Output tokens: mean {lengths.mean_tokens:.1f}, "
                     + ", ".join(f"{k} {v:.0f}" for k, v in lengths.quantiles.items()))
        lines.append(f"  Repeated strings: {lengths.repeated_count}/{lengths.count} "
                     f"({lengths.repeated_rate * 100:.1f}%)")
    histogram = ", ".join(f"{k}: {v}" for k, v in sorted(report.example_count.items()))
    lines.append(f"  Demonstrations per record: {histogram}")
    return lines


def cmd_report(args) -> int:
    """Handle report command."""
    from . import colors, display
    from ..core.metrics import SubprocessQualityScorer, build_report

    _require_file(args.records, "Record file")
    try:
        records = list(read_records(args.records))
    except RecordFileError as e:
        return _fail(f"Malformed record file: {e}")

    scorer = SubprocessQualityScorer(args.quality_cmd) if args.quality_cmd else None
    report = build_report(records, scorer=scorer)
    if report.quality.status == 'failed':
        print(colors.warning(f"Warning: quality scorer failed ({report.quality.detail})"),
              file=sys.stderr)

    if args.output:
        write_json_atomic(args.output, report.to_dict())
    if args.json:
        display.print_json(report.to_dict())
    else:
        for line in format_report(report):
            print(line)
    return EXIT_OK


# =============================================================================
# main
# =============================================================================

def main(argv=None) -> int:
    """Main CLI entry point."""
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    # Configure logging based on verbose/quiet flags
    if args.verbose:
        logging.basicConfig(
            level=logging.DEBUG,
            format='%(name)s - %(levelname)s - %(message)s',
            stream=sys.stderr
        )
    elif args.quiet:
        logging.basicConfig(level=logging.ERROR, format='%(levelname)s: %(message)s',
                            stream=sys.stderr)

    from . import colors
    colors.init(nocolor=args.nocolor)

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    handlers = {
        'translate': cmd_translate,
        'batch': cmd_batch,
        'pool': cmd_pool,
        'report': cmd_report,
    }

    try:
        return handlers[args.command](args)

    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        return 130

    except (ConfigError, TemplateError) as e:
        return _fail(str(e), EXIT_USAGE)

    except (PoolError, GatewayError, RecordFileError, OSError) as e:
        if args.verbose:
            import traceback
            traceback.print_exc()
        return _fail(str(e), EXIT_FAILURE)


if __name__ == '__main__':
    sys.exit(main())
