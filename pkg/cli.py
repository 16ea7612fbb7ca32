#!/usr/bin/env python3
# cli.py - Command-Line Entry Point for the Coreference Pipelines
import argparse
import json
import os
import re
import sys
from typing import Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import config
from modules.backend import BackendConfig, NoiseSpec, ResponseRecord, make_backend, run_batch
from modules.corpus import (
    Clustering, Document, drop_non_referring, load_documents, parse_canonical,
    parse_canonical_lines, parse_conll, sample_documents, save_documents
)
from modules.docgen import DocumentGenerator, check_batch, summarize
from modules.joint import ABLATIONS, JointResolver
from modules.scorer import ScoreFlags, score_corpus
from modules.synthetic import generate_corpus
from modules.templates import (
    ContextMode, InstructionSet, PromptRecord, TaskMode, build_prompts, export_sft
)
from modules.utils import logger, dump_json, read_jsonl, write_jsonl, ConfigError, CorefWeaveError

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_PARTIAL = 2

# ========== RUN CONFIGURATION ==========

class BackendSettings(BaseModel):
    model_config = ConfigDict(extra='forbid')

    kind: Literal['remote', 'mock'] = 'remote'
    base_url: str = config.LLM_BASE_URL
    model_name: str = config.LLM_MODEL
    api_key_env: str = config.LLM_API_KEY_ENV
    temperature: float = Field(config.LLM_TEMPERATURE, ge=0)
    max_tokens: int = Field(config.LLM_MAX_TOKENS, ge=1)
    timeout_s: float = Field(config.LLM_TIMEOUT, gt=0)
    max_retries: int = Field(config.LLM_MAX_RETRIES, ge=0)
    parallelism: int = Field(config.LLM_PARALLELISM, ge=1)
    backoff_base_s: float = Field(config.LLM_BACKOFF_BASE, ge=0)


class NoiseSettings(BaseModel):
    model_config = ConfigDict(extra='forbid')

    seed: int = 0
    p_fwd_swap: float = Field(0.0, ge=0, le=1)
    p_bwd_swap: float = Field(0.0, ge=0, le=1)
    p_none_flip: float = Field(0.0, ge=0, le=1)
    p_dup: float = Field(0.0, ge=0, le=1)
    p_drop: float = Field(0.0, ge=0, le=1)
    p_id_err: float = Field(0.0, ge=0, le=1)


class JointSettings(BaseModel):
    model_config = ConfigDict(extra='forbid')

    ablation: Literal['joint', 'fwd_bwd', 'fwd_only'] = 'joint'
    chain_threshold: float = Field(config.CHAIN_THRESHOLD, ge=0)
    found_threshold: float = Field(config.FOUND_THRESHOLD, ge=0)


class PathSettings(BaseModel):
    model_config = ConfigDict(extra='forbid')

    docs: Optional[str] = None
    prompts: Optional[str] = None
    responses: Optional[List[str]] = None
    output: Optional[str] = None
    report: Optional[str] = None
    generated: Optional[str] = None


class RunConfig(BaseModel):
    """Declarative run configuration; unknown keys are rejected."""
    model_config = ConfigDict(extra='forbid')

    backend: BackendSettings = Field(default_factory=BackendSettings)
    noise: NoiseSettings = Field(default_factory=NoiseSettings)
    chain_len: int = Field(config.CHAIN_LEN, ge=1)
    backward_chain: bool = config.BACKWARD_CHAIN
    context_mode: Literal['previous_sentence', 'none'] = config.ITER_CONTEXT_MODE
    instructions_dir: Optional[str] = config.INSTRUCTIONS_DIR
    keep_non_referring: bool = config.KEEP_NON_REFERRING
    joint: JointSettings = Field(default_factory=JointSettings)
    paths: PathSettings = Field(default_factory=PathSettings)


_VAR_RE = re.compile(r'\$\{([A-Za-z_][A-Za-z0-9_]*)\}')


def _lookup_env(match: re.Match) -> str:
    name = match.group(1)
    if name not in os.environ:
        raise ConfigError(f"config references ${{{name}}} but it is not set in the environment")
    return os.environ[name]


def interpolate_env(value):
    """Replace `${VAR}` in every string of a JSON value."""
    if isinstance(value, str):
        return _VAR_RE.sub(_lookup_env, value)
    if isinstance(value, list):
        return [interpolate_env(v) for v in value]
    if isinstance(value, dict):
        return {k: interpolate_env(v) for k, v in value.items()}
    return value


def load_run_config(path: Optional[str]) -> RunConfig:
    """
    Read and validate a JSON run configuration.

    Raises:
        ConfigError: unreadable file, missing variable or schema violation
    """
    if not path:
        return RunConfig()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        return RunConfig.model_validate(interpolate_env(raw))
    except ValidationError as e:
        problems = '; '.join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid config {path}: {problems}") from None

# ========== HELPERS ==========

def _require(value, fallback, name: str):
    chosen = value if value is not None else fallback
    if chosen is None:
        raise ConfigError(f"missing --{name} (and no paths.{name} in the config)")
    return chosen


def _emit(payload: Dict, out_path: Optional[str]):
    text = dump_json(payload)
    if out_path:
        with open(out_path, 'w', encoding='utf-8') as f:
            f.write(text)
            f.write('\n')
        logger.info(f"💾 Report written to {out_path}")
    else:
        sys.stdout.write(text + '\n')


def _instructions(run: RunConfig) -> InstructionSet:
    directory = run.instructions_dir
    if directory and not os.path.isabs(directory) and not os.path.isdir(directory):
        directory = os.path.join(os.path.dirname(os.path.abspath(__file__)), directory)
    return InstructionSet.load(directory)


def _backend_config(args, run: RunConfig) -> BackendConfig:
    settings = run.backend.model_dump()
    if getattr(args, 'mock', False):
        settings['kind'] = 'mock'
    if getattr(args, 'parallelism', None):
        settings['parallelism'] = args.parallelism
    return BackendConfig(**settings)


def _noise(args, run: RunConfig) -> NoiseSpec:
    if getattr(args, 'noise', None):
        return NoiseSpec.parse(args.noise)
    return NoiseSpec(**run.noise.model_dump())


def _load_with_format(path: str, fmt: str) -> List[Document]:
    if fmt == 'auto':
        return load_documents(path)
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    if fmt == 'conll':
        return parse_conll(text)
    if fmt == 'jsonl':
        return parse_canonical_lines(text)
    return [parse_canonical(text)]


def _load_response_documents(path: str) -> List[Document]:
    """CoNLL carries a single clustering, which is the system output on the response side."""
    docs = load_documents(path)
    if os.path.splitext(path)[1].lower() in ('.json', '.jsonl'):
        return docs
    return [doc.with_predicted(doc.gold) for doc in docs]


def _load_records(path: str) -> List[PromptRecord]:
    return [PromptRecord.from_dict(row) for row in read_jsonl(path)]


def _load_responses(paths: Sequence[str]) -> List[ResponseRecord]:
    responses = []
    for path in paths:
        responses.extend(ResponseRecord.from_dict(row) for row in read_jsonl(path))
    return responses

# ========== SUBCOMMANDS ==========

def cmd_convert(args, run: RunConfig) -> int:
    docs = _load_with_format(_require(args.input, run.paths.docs, 'input'), args.in_format)
    keep = args.keep_non_referring or run.keep_non_referring
    if not keep:
        docs = [drop_non_referring(doc) for doc in docs]
    if args.sample:
        docs = sample_documents(docs, args.sample, args.seed)
    count = save_documents(docs, _require(args.output, run.paths.output, 'output'))
    _emit({'documents': count, 'mentions': sum(d.num_mentions for d in docs)}, args.out)
    return EXIT_OK


def cmd_synth(args, run: RunConfig) -> int:
    docs = generate_corpus(args.docs, args.seed, args.prefix)
    count = save_documents(docs, _require(args.output, run.paths.output, 'output'))
    _emit({'documents': count, 'mentions': sum(d.num_mentions for d in docs), 'seed': args.seed}, args.out)
    return EXIT_OK


def cmd_gen_prompts(args, run: RunConfig) -> int:
    docs = load_documents(_require(args.docs, run.paths.docs, 'docs'))
    modes = [TaskMode(m.strip()) for m in args.modes.split(',') if m.strip()]
    chain_len = args.chain_len or run.chain_len
    context_mode = ContextMode(args.context_mode or run.context_mode)
    instructions = _instructions(run)

    records: List[PromptRecord] = []
    for doc in docs:
        records.extend(build_prompts(doc, modes, chain_len, run.backward_chain, context_mode, instructions))
    write_jsonl(_require(args.output, run.paths.prompts, 'output'), (r.to_dict() for r in records))

    counts = {mode.value: sum(1 for r in records if r.mode == mode) for mode in modes}
    _emit({'documents': len(docs), 'records': len(records), 'per_mode': counts}, args.out)
    return EXIT_OK


def cmd_export_sft(args, run: RunConfig) -> int:
    records = _load_records(_require(args.prompts, run.paths.prompts, 'prompts'))
    count = export_sft(records, _require(args.output, run.paths.output, 'output'))
    _emit({'records': count}, args.out)
    return EXIT_OK


def cmd_infer(args, run: RunConfig) -> int:
    records = _load_records(_require(args.prompts, run.paths.prompts, 'prompts'))
    cfg = _backend_config(args, run)
    docs = None
    if cfg.kind == 'mock':
        docs = load_documents(_require(args.docs, run.paths.docs, 'docs'))
    backend = make_backend(cfg, docs, _noise(args, run))

    responses = run_batch(backend, records, cfg.parallelism)
    output = _require(args.output, (run.paths.responses or [None])[0], 'output')
    write_jsonl(output, (r.to_dict() for r in responses))

    failed = sum(1 for r in responses if r.failed)
    _emit({'records': len(responses), 'failed': failed, 'output': output}, args.out)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_joint(args, run: RunConfig) -> int:
    docs = load_documents(_require(args.docs, run.paths.docs, 'docs'))
    responses = _load_responses(_require(args.responses, run.paths.responses, 'responses'))
    resolver = JointResolver(
        args.ablation or run.joint.ablation,
        args.chain_threshold if args.chain_threshold is not None else run.joint.chain_threshold,
        args.found_threshold if args.found_threshold is not None else run.joint.found_threshold
    )
    results, diagnostics = resolver.resolve_corpus(docs, responses)

    predicted = {r.doc_key: r.predicted for r in results}
    output = _require(args.output, run.paths.output, 'output')
    save_documents([doc.with_predicted(predicted[doc.doc_key]) for doc in docs], output, which='predicted')
    _emit({
        'documents': len(results),
        'ablation': resolver.ablation,
        'pairs': sum(len(r.pairs) for r in results),
        'diagnostics': diagnostics.to_dict(),
        'output': output
    }, args.out)
    return EXIT_OK


def cmd_docgen(args, run: RunConfig) -> int:
    docs = load_documents(_require(args.docs, run.paths.docs, 'docs'))
    cfg = _backend_config(args, run)
    backend = make_backend(cfg, docs if cfg.kind == 'mock' else None, _noise(args, run))
    generator = DocumentGenerator(
        backend,
        ContextMode(args.context_mode or run.context_mode),
        _instructions(run)
    )
    results = generator.run_batch(docs, args.mode)

    output = _require(args.output, run.paths.output, 'output')
    predicted_docs = []
    for doc, result in zip(docs, results):
        # unusable output resolves nothing: every mention stays alone
        clustering = result.predicted or Clustering.all_singletons(doc.num_mentions)
        predicted_docs.append(doc.with_predicted(clustering))
    save_documents(predicted_docs, output, which='predicted')

    report_path = args.report or run.paths.report
    if report_path:
        write_jsonl(report_path, (r.to_report_row() for r in results))
    generated_path = args.generated or run.paths.generated
    if generated_path:
        write_jsonl(generated_path, (
            {'doc_key': r.doc_key, 'text': r.generated} for r in results if r.generated is not None
        ))

    summary = summarize(results)
    summary.update({'mode': args.mode, 'output': output})
    _emit(summary, args.out)
    return EXIT_PARTIAL if summary['failed'] else EXIT_OK


def cmd_check(args, run: RunConfig) -> int:
    docs = load_documents(_require(args.docs, run.paths.docs, 'docs'))
    rows = read_jsonl(_require(args.generated, run.paths.generated, 'generated'))
    generated = {row['doc_key']: row['text'] for row in rows}
    report = check_batch(docs, generated)
    if not args.per_document:
        report.pop('per_document')
    _emit(report, args.out)
    return EXIT_OK


def cmd_score(args, run: RunConfig) -> int:
    key_docs = load_documents(args.key)
    response_docs = _load_response_documents(args.response)
    flags = ScoreFlags(
        drop_singletons=not args.keep_singletons,
        drop_split_antecedents=args.drop_split_antecedents
    )
    report, per_doc = score_corpus(key_docs, response_docs, flags)
    if args.per_doc:
        with open(args.per_doc, 'w', encoding='utf-8') as f:
            f.write('doc_key\tmuc_f1\tb3_f1\tceaf_e_f1\tconll_f1\n')
            for doc_report in per_doc + [report]:
                f.write(doc_report.to_tsv_row() + '\n')
    _emit(report.to_dict(), args.out)
    return EXIT_OK

# ========== PARSER ==========

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run configuration (${VAR} values come from the environment)')
    common.add_argument('--out', help='write the JSON report here instead of stdout')

    backend_args = argparse.ArgumentParser(add_help=False)
    backend_args.add_argument('--mock', action='store_true', help='answer from gold with the mock backend')
    backend_args.add_argument('--noise', help='mock corruption, e.g. "seed=7,p_fwd_swap=0.3"')
    backend_args.add_argument('--parallelism', type=int, help='requests in flight (default: config)')

    parser = argparse.ArgumentParser(
        prog='corefweave',
        description='LLM coreference resolution: prompt datasets, joint inference, document generation, scoring'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('convert', parents=[common], help='convert CoNLL or canonical JSON documents')
    p.add_argument('--input')
    p.add_argument('--in-format', choices=['auto', 'conll', 'json', 'jsonl'], default='auto')
    p.add_argument('--output', help='.jsonl / .json canonical or CoNLL by extension')
    p.add_argument('--keep-non-referring', action='store_true')
    p.add_argument('--sample', type=int, help='keep a random subset of this many documents')
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(handler=cmd_convert)

    p = sub.add_parser('synth', parents=[common], help='write a seeded synthetic corpus')
    p.add_argument('--docs', type=int, default=100)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--prefix', default='synth')
    p.add_argument('--output')
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('gen-prompts', parents=[common], help='build prompt records')
    p.add_argument('--docs')
    p.add_argument('--modes', default='qa_forward,qa_backward,qa_singleton',
                   help=f"comma-separated from {', '.join(m.value for m in TaskMode)}")
    p.add_argument('--chain-len', type=int, help=f'antecedents per chain answer (default {config.CHAIN_LEN})')
    p.add_argument('--context-mode', choices=[m.value for m in ContextMode])
    p.add_argument('--output')
    p.set_defaults(handler=cmd_gen_prompts)

    p = sub.add_parser('export-sft', parents=[common], help='write SFT training JSONL from prompt records')
    p.add_argument('--prompts')
    p.add_argument('--output')
    p.set_defaults(handler=cmd_export_sft)

    p = sub.add_parser('infer', parents=[common, backend_args], help='complete prompt records')
    p.add_argument('--prompts')
    p.add_argument('--docs', help='gold documents (mock backend only)')
    p.add_argument('--output')
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser('joint', parents=[common], help='joint inference over QA responses')
    p.add_argument('--docs')
    p.add_argument('--responses', nargs='+', help='one or more response JSONL files')
    p.add_argument('--ablation', choices=list(ABLATIONS))
    p.add_argument('--chain-threshold', type=float)
    p.add_argument('--found-threshold', type=float)
    p.add_argument('--output')
    p.set_defaults(handler=cmd_joint)

    p = sub.add_parser('docgen', parents=[common, backend_args], help='document-template generation')
    p.add_argument('--docs')
    p.add_argument('--mode', choices=['full', 'iter'], default='iter')
    p.add_argument('--context-mode', choices=[m.value for m in ContextMode])
    p.add_argument('--output', help='documents with predicted clusters')
    p.add_argument('--report', help='per-document JSONL {doc_key, pass, em, coerced_ids, steps}')
    p.add_argument('--generated', help='generated annotated texts as JSONL {doc_key, text}')
    p.set_defaults(handler=cmd_docgen)

    p = sub.add_parser('check', parents=[common], help='alignment check and exact match of generated texts')
    p.add_argument('--docs')
    p.add_argument('--generated')
    p.add_argument('--per-document', action='store_true')
    p.set_defaults(handler=cmd_check)

    p = sub.add_parser('score', parents=[common], help='MUC, B-cubed, CEAF-e and CoNLL F1')
    p.add_argument('--key', required=True)
    p.add_argument('--response', required=True)
    p.add_argument('--keep-singletons', action='store_true', help='score singleton clusters too (default: off)')
    p.add_argument('--drop-split-antecedents', action=argparse.BooleanOptionalAction, default=True,
                   help='remove split-antecedent mentions before scoring (default: on)')
    p.add_argument('--per-doc', help='write a per-document TSV table here')
    p.set_defaults(handler=cmd_score)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = load_run_config(args.config)
        return args.handler(args, run)
    except CorefWeaveError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_INVALID
    except (OSError, KeyError, ValueError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_INVALID


if __name__ == '__main__':
    sys.exit(main())
