"""
hrm-text command line

```
hrm-text flops --params 1e9 --tokens 1.7e11 --dense
hrm-text train --config example/tiny.yaml --tokenizer tok.tok --synthetic 60000 --seed 7
```

Every subcommand writes into its own run directory (under
$HRM_TEXT_OUTPUT_ROOT, default ./runs) holding the resolved config and a
manifest. Exit status is 0 on success, 2 for configuration errors and 1 for
any other failure.
"""


import argparse
import datetime
import json
import logging
import sys
import zlib
from importlib import metadata
from pathlib import Path

import numpy as np
from google.protobuf import json_format
from google.protobuf import struct_pb2

from hrm_text import tensor as T
from hrm_text.checkpoint import load_checkpoint
from hrm_text.config import RunConfig
from hrm_text.config import dump_run_config
from hrm_text.config import load_run_config
from hrm_text.config import output_root
from hrm_text.contamination import contamination_report
from hrm_text.contamination import word_tokens
from hrm_text.data import corpus_paths
from hrm_text.data import pack_corpus
from hrm_text.data import read_corpus
from hrm_text.data import stratified_sample
from hrm_text.data import strip_think
from hrm_text.data import write_corpus
from hrm_text.data import Document
from hrm_text.diagnostics import Granularity
from hrm_text.diagnostics import count_parameters
from hrm_text.diagnostics import depth_probe
from hrm_text.diagnostics import flops_dense
from hrm_text.diagnostics import flops_recurrent
from hrm_text.diagnostics import grad_stats_by_component
from hrm_text.diagnostics import jacobian_growth
from hrm_text.diagnostics import module_step_fn
from hrm_text.diagnostics import normalize_within_checkpoint
from hrm_text.diagnostics import paired_gradient_comparison
from hrm_text.diagnostics import step_equivalents
from hrm_text.diagnostics import write_report
from hrm_text.errors import ConfigError
from hrm_text.errors import HrmTextError
from hrm_text.inference import decode_file
from hrm_text.inference import evaluate_exact_match
from hrm_text.inference import evaluate_nll
from hrm_text.inference import guidance_sweep
from hrm_text.model import Parameters
from hrm_text.model import Variant
from hrm_text.model import rms_norm
from hrm_text.objective import build_prefixlm_mask
from hrm_text.synthetic import synthetic_corpus
from hrm_text.tokenizer import TokenizerModel
from hrm_text.tokenizer import bpe_train
from hrm_text.trainer import AttentionMode
from hrm_text.trainer import assemble_batches
from hrm_text.trainer import mean_horizon
from hrm_text.trainer import train_loop


logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def format_flops(value: float) -> str:
    """
    Three significant digits with a bare exponent, e.g. 1.02e21
    """
    mantissa, exponent = f'{value:.2e}'.split('e')
    return f'{mantissa}e{int(exponent)}'


def _version() -> str:
    try:
        return metadata.version('hrm-text')
    except metadata.PackageNotFoundError:
        return 'unknown'


def _file_record(path) -> dict:
    path = Path(path)
    if path.is_dir():
        return {'path': str(path), 'files': [_file_record(child) for child in sorted(path.glob('*.jsonl'))]}
    data = path.read_bytes()
    return {'path': str(path), 'bytes': len(data), 'crc32': zlib.crc32(data)}


class Run:
    """
    Run directory holding the resolved config, the manifest and all outputs
    """

    def __init__(self, command: str, args: argparse.Namespace, config: RunConfig | None):
        if args.run_dir:
            self.path = Path(args.run_dir)
        else:
            stamp = datetime.datetime.now().strftime('%Y%m%d-%H%M%S')
            self.path = output_root() / f'{command}-{stamp}'
            suffix = 1
            while self.path.exists():
                self.path = output_root() / f'{command}-{stamp}-{suffix}'
                suffix += 1
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.args = args
        self.config = config
        self.inputs: list[dict] = []
        self.outputs: list[str] = []

        if config is not None:
            dump_run_config(config, self.path / 'config.yaml')
            logger.info('Resolved config: %s', json.dumps(config.to_record(), sort_keys=True))

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise HrmTextError(f'input {path} does not exist')
        self.inputs.append(_file_record(path))
        return path

    def output(self, name: str) -> Path:
        self.outputs.append(name)
        return self.path / name

    def write_manifest(self) -> None:
        arguments = {key: str(value) for key, value in vars(self.args).items() if key != 'handler' and value is not None}
        manifest = {
            'command': self.command,
            'version': _version(),
            'arguments': arguments,
            'inputs': self.inputs,
            'outputs': self.outputs,
        }
        if self.config is not None:
            manifest['config'] = self.config.to_record()
        message = struct_pb2.Struct()
        json_format.ParseDict(manifest, message)
        with open(self.path / 'manifest.json', 'w', encoding='utf-8') as handle:
            json.dump(json_format.MessageToDict(message, preserving_proto_field_name=True), handle, indent=2, sort_keys=True)


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config) if getattr(args, 'config', None) else RunConfig()
    if getattr(args, 'seed', None) is not None:
        config = config.with_seed(args.seed)
        config.validate()
    return config


def _load_model(run: Run, path, use_ema: bool = True):
    checkpoint = load_checkpoint(run.input(path))
    return checkpoint.config, checkpoint.parameters(use_ema)


def cmd_tokenizer_train(args, run: Run) -> None:
    documents = read_corpus(corpus_paths(run.input(args.corpus)), args.workers)
    texts = []
    for document in documents:
        texts.append(document.instruction)
        texts.append(strip_think(document.response))
    vocab = args.vocab or run.config.model.vocab_size
    tokenizer = bpe_train(texts, vocab)
    tokenizer.save(run.output('tokenizer.tok'))


def cmd_mixture_build(args, run: Run) -> None:
    documents = read_corpus(corpus_paths(run.input(args.corpus)), args.workers)
    documents = [
        Document(document.instruction, strip_think(document.response), document.dataset, document.task, document.condition)
        for document in documents
    ]
    token_count = None
    if args.tokenizer:
        tokenizer = TokenizerModel.load(run.input(args.tokenizer))

        def token_count(document):
            return 1 + len(tokenizer.encode(document.instruction)) + len(tokenizer.encode(document.response)) + 1

    stream, report = stratified_sample(documents, run.config.mixture, token_count)
    write_corpus(run.output('mixture.jsonl'), stream)
    write_report(run.output('sampling.tsv'), report.rows())


def cmd_train(args, run: Run) -> None:
    config = run.config
    tokenizer = TokenizerModel.load(run.input(args.tokenizer))
    if tokenizer.vocab_size > config.model.vocab_size:
        raise ConfigError('model.vocab_size', f'smaller than the tokenizer vocabulary ({tokenizer.vocab_size})')

    if args.synthetic:
        documents = synthetic_corpus(args.synthetic, seed=config.train.seed)
    elif args.corpus:
        documents = read_corpus(corpus_paths(run.input(args.corpus)), args.workers)
    else:
        raise ConfigError('train.corpus', 'pass --corpus or --synthetic')

    max_len = config.train.row_len or config.model.context_len
    examples, rejected = pack_corpus(documents, tokenizer, max_len)
    if rejected:
        with open(run.output('rejected.jsonl'), 'w', encoding='utf-8') as handle:
            for record in rejected:
                handle.write(json.dumps(record) + '\n')

    with T.precision(args.precision):
        result = train_loop(config.model, config.train, examples, tokenizer.pad_id, run.path)
    run.outputs.extend(['metrics.jsonl', 'final.ckpt'])

    if args.heldout:
        heldout = read_corpus([run.input(args.heldout)], args.workers)
        params = load_checkpoint(result.checkpoint).parameters(use_ema=True)
        held_examples, _ = pack_corpus(heldout, tokenizer, max_len)
        rows = [
            (result.steps, 'heldout_nll', evaluate_nll(held_examples, config.model, params, config.train.attention is AttentionMode.CAUSAL)),
            (result.steps, 'exact_match', evaluate_exact_match(heldout, tokenizer, config.model, params, config.decode, args.workers)),
        ]
        write_report(run.output('eval.tsv'), rows)


def cmd_decode(args, run: Run) -> None:
    config = run.config
    model, params = _load_model(run, args.checkpoint)
    tokenizer = TokenizerModel.load(run.input(args.tokenizer))
    decode_cfg = config.decode
    if args.w is not None or args.max_new_tokens is not None:
        decode_cfg = type(decode_cfg)(
            args.max_new_tokens or decode_cfg.max_new_tokens,
            decode_cfg.guidance_scale if args.w is None else args.w,
            decode_cfg.shallow_exit,
            decode_cfg.temperature,
            decode_cfg.context_cap,
            decode_cfg.grid,
        )
        decode_cfg.validate()

    prompts = run.input(args.prompts)
    if args.sweep:
        documents = read_corpus([prompts])
        sweep = guidance_sweep(documents, tokenizer, model, params, decode_cfg, args.workers)
        write_report(run.output('sweep.tsv'), sweep.rows())
    else:
        decode_file(prompts, run.output('outputs.jsonl'), tokenizer, model, params, decode_cfg, args.workers)


def _prompt_tokens(documents, tokenizer, limit):
    for document in documents[:limit]:
        tokens = [tokenizer.condition_id(document.condition)] + tokenizer.encode(document.instruction)
        yield tokens + tokenizer.encode(document.response), len(tokens)


def cmd_analyze_depth(args, run: Run) -> None:
    model, params = _load_model(run, args.checkpoint)
    tokenizer = TokenizerModel.load(run.input(args.tokenizer))
    documents = read_corpus([run.input(args.prompts)])

    probes = [
        depth_probe(tokens[:model.context_len], min(prefix_len, model.context_len), model, params, args.granularity)
        for tokens, prefix_len in _prompt_tokens(documents, tokenizer, args.samples)
    ]
    if not probes:
        raise HrmTextError('no prompts to probe')
    rows = []
    for name in ('diff_norms', 'cosines', 'kl', 'entropies'):
        mean = np.nanmean(np.stack([getattr(probe, name) for probe in probes]), axis=0)
        rows.extend((index, name, float(value)) for index, value in enumerate(mean))
    rows.append((0, 'samples', len(probes)))
    write_report(run.output('depth.tsv'), rows)


def _first_batch(model, train_cfg, tokenizer, documents):
    max_len = train_cfg.row_len or model.context_len
    examples, _ = pack_corpus(documents, tokenizer, max_len)
    batch = next(iter(assemble_batches(examples, train_cfg.batch_tokens, max_len, tokenizer.pad_id, train_cfg.objective, train_cfg.attention)), None)
    if batch is None:
        raise HrmTextError('corpus yields no batch')
    return batch


def cmd_analyze_grads(args, run: Run) -> None:
    model, params = _load_model(run, args.checkpoint, use_ema=False)
    tokenizer = TokenizerModel.load(run.input(args.tokenizer))
    documents = read_corpus(corpus_paths(run.input(args.corpus)), args.workers)
    batch = _first_batch(model, run.config.train, tokenizer, documents)

    horizons = [int(value) for value in args.horizons.split(',')]
    rows, dispersion = [], {}
    for k in horizons:
        paired = paired_gradient_comparison(
            batch.tokens, 0, model, params, k,
            mask=batch.mask, positions=batch.positions, loss_mask=batch.loss_mask, segment_ids=batch.segment_ids
        )
        for mode, stats in paired.items():
            for component, stat in stats.items():
                prefix = f'{mode}.{component}'
                rows.append((k, f'{prefix}.mean_abs', stat.mean_abs))
                rows.append((k, f'{prefix}.log_dispersion', stat.log_dispersion))
                rows.append((k, f'{prefix}.tail_to_median', stat.tail_to_median))
        dispersion[k] = paired['truncated']['all'].log_dispersion
    for k, value in normalize_within_checkpoint(dispersion, horizons[0]).items():
        rows.append((k, 'truncated.all.log_dispersion.normalized', value))

    if args.jacobian_depths and model.variant is not Variant.STANDARD:
        rows.extend(_jacobian_rows(model, params, batch, args))
    write_report(run.output('grads.tsv'), rows)


def _jacobian_rows(model, params, batch, args) -> list[tuple]:
    params64 = Parameters.from_arrays({name: array.astype(np.float64) for name, array in params.arrays().items()})
    tokens = batch.tokens[0][batch.segment_ids[0] == 1]
    mask = build_prefixlm_mask(0, len(tokens))
    with T.precision(T.Precision.DOUBLE), T.no_grad():
        embedded = T.embedding(params64['embed'], tokens).data
    if model.variant is Variant.HRM:
        # L-module step at the initial states: z = z_L^0, injection = z_H^0 + embeddings
        with T.precision(T.Precision.DOUBLE), T.no_grad():
            z_h = rms_norm(T.Tensor(embedded), model.norm_eps).data
        state = np.broadcast_to(params64['z_l0'].data, embedded.shape).copy()
        step = module_step_fn(model, params64, z_h + embedded, mask, 'l')
    else:
        state = np.zeros_like(embedded)
        step = module_step_fn(model, params64, embedded, mask, 'core')
    depths = [int(value) for value in args.jacobian_depths.split(',')]
    rows = []
    for estimate in jacobian_growth(step, state, depths, probes=args.probes):
        rows.append((estimate.depth, 'jacobian_growth', estimate.estimate))
        rows.append((estimate.depth, 'jacobian_converged', int(estimate.converged)))
    return rows


def cmd_flops(args, run: Run) -> None:
    if args.config:
        model, train_cfg = run.config.model, run.config.train
        n_params = args.params or count_parameters(model, core_only=True)
        fwd, bwd = step_equivalents(model, mean_horizon(train_cfg))
        n_tokens = args.tokens or float(train_cfg.total_steps * train_cfg.batch_tokens)
    else:
        if args.params is None or args.tokens is None:
            raise ConfigError('flops', 'pass --params and --tokens, or --config')
        n_params, n_tokens = args.params, args.tokens
        fwd, bwd = args.fwd, args.bwd

    if args.dense:
        value = flops_dense(n_params, n_tokens)
    else:
        value = flops_recurrent(n_params, n_tokens, fwd, bwd)
    print(format_flops(value))
    write_report(run.output('flops.tsv'), [
        (0, 'params', n_params),
        (0, 'tokens', n_tokens),
        (0, 'fwd_step_equiv', 1.0 if args.dense else fwd),
        (0, 'bwd_step_equiv', 1.0 if args.dense else bwd),
        (0, 'flops', value),
    ])


def _read_eval(path):
    samples, scores = [], []
    with open(path, encoding='utf-8') as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            if 'text' not in record or 'score' not in record:
                raise HrmTextError(f'{path}:{line_number}: eval records need "text" and "score"')
            samples.append(record['text'])
            scores.append(float(record['score']))
    return samples, scores


def _read_corpus_texts(path):
    texts = []
    with open(path, encoding='utf-8') as handle:
        for line in handle:
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                record = line
            if isinstance(record, dict):
                texts.append(f'{record.get("instruction", "")} {record.get("response", "")}')
            else:
                texts.append(str(record))
    return texts


def cmd_contamination(args, run: Run) -> None:
    corpus = []
    for path in corpus_paths(run.input(args.corpus)):
        corpus.extend(_read_corpus_texts(path))
    samples, scores = _read_eval(run.input(args.eval))

    if args.tokenizer:
        tokenizer = TokenizerModel.load(run.input(args.tokenizer))
        tokenize = tokenizer.encode
    else:
        tokenize = word_tokens

    report = contamination_report(
        [tokenize(text) for text in corpus],
        [tokenize(text) for text in samples],
        scores,
        args.n,
        args.workers,
    )
    table = report.table()
    print(table, end='')
    with open(run.output('contamination.tsv'), 'w', encoding='utf-8') as handle:
        handle.write(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='hrm-text', description='HRM-Text training and analysis toolkit')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parser.add_argument('--run-dir', help='explicit run directory (default: $HRM_TEXT_OUTPUT_ROOT/<command>-<time>)')
    subparsers = parser.add_subparsers(dest='command', required=True)

    def add(name, handler, help_text):
        sub = subparsers.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        sub.add_argument('--config', help='run config YAML')
        sub.add_argument('--workers', type=int, default=1)
        return sub

    sub = add('tokenizer-train', cmd_tokenizer_train, 'train the byte-level BPE tokenizer')
    sub.add_argument('--corpus', required=True)
    sub.add_argument('--vocab', type=int)

    sub = add('mixture-build', cmd_mixture_build, 'build the stratified training mixture')
    sub.add_argument('--corpus', required=True)
    sub.add_argument('--tokenizer')
    sub.add_argument('--seed', type=int)

    sub = add('train', cmd_train, 'train a model')
    sub.add_argument('--tokenizer', required=True)
    sub.add_argument('--corpus')
    sub.add_argument('--synthetic', type=int, help='train on N generated copy/reverse documents')
    sub.add_argument('--heldout', help='corpus file scored with the EMA weights after training')
    sub.add_argument('--seed', type=int)
    sub.add_argument('--precision', type=int, default=32, choices=[32, 64])

    sub = add('decode', cmd_decode, 'greedy decoding with optional auto-guidance')
    sub.add_argument('--checkpoint', required=True)
    sub.add_argument('--tokenizer', required=True)
    sub.add_argument('--prompts', required=True)
    sub.add_argument('--w', type=float, help='guidance scale')
    sub.add_argument('--max-new-tokens', type=int)
    sub.add_argument('--sweep', action='store_true', help='evaluate every grid scale per task')

    sub = add('analyze-depth', cmd_analyze_depth, 'effective-depth metrics')
    sub.add_argument('--checkpoint', required=True)
    sub.add_argument('--tokenizer', required=True)
    sub.add_argument('--prompts', required=True)
    sub.add_argument('--samples', type=int, default=16)
    sub.add_argument('--granularity', type=Granularity, default=Granularity.BLOCK, choices=list(Granularity))

    sub = add('analyze-grads', cmd_analyze_grads, 'gradient-stability statistics')
    sub.add_argument('--checkpoint', required=True)
    sub.add_argument('--tokenizer', required=True)
    sub.add_argument('--corpus', required=True)
    sub.add_argument('--horizons', default='2,3,4,5')
    sub.add_argument('--jacobian-depths', help='comma-separated depths for Jacobian growth')
    sub.add_argument('--probes', type=int, default=3)

    sub = add('flops', cmd_flops, 'training FLOPs estimate')
    sub.add_argument('--params', type=float)
    sub.add_argument('--tokens', type=float)
    sub.add_argument('--dense', action='store_true')
    sub.add_argument('--fwd', type=float, default=1.0, help='forward step equivalents')
    sub.add_argument('--bwd', type=float, default=1.0, help='backward step equivalents')

    sub = add('contamination', cmd_contamination, 'n-gram contamination report')
    sub.add_argument('--corpus', required=True)
    sub.add_argument('--eval', required=True)
    sub.add_argument('--n', type=int, default=13)
    sub.add_argument('--tokenizer')

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)

    try:
        config = _load_config(args)
        run = Run(args.command, args, config)
        args.handler(args, run)
        run.write_manifest()
    except ConfigError as error:
        print(f'error: {error}', file=sys.stderr)
        return 2
    except HrmTextError as error:
        print(f'error: {error}', file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
