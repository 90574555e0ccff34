"""
Usage:
    Train a tiny HRM on synthetic copy / reverse tasks and decode a few prompts:
        python demo.py

    Optionally, set the number of training steps:
        python demo.py 200
"""


import logging
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from hrm_text.checkpoint import load_checkpoint
from hrm_text.config import load_run_config
from hrm_text.data import pack_corpus
from hrm_text.diagnostics import count_parameters
from hrm_text.diagnostics import depth_probe
from hrm_text.diagnostics import recursion_count
from hrm_text.inference import decode_document
from hrm_text.synthetic import synthetic_corpus
from hrm_text.tokenizer import bpe_train
from hrm_text.trainer import train_loop


CONFIG = Path(__file__).parent / 'tiny.yaml'


def train_tokenizer(config, documents):
    """
    Trains the BPE tokenizer on the instructions and responses
    """
    texts = [text for document in documents for text in (document.instruction, document.response)]
    return bpe_train(texts, config.model.vocab_size)


def main():
    logging.basicConfig(level=logging.INFO, format='%(levelname)s %(name)s: %(message)s')

    config = load_run_config(CONFIG)
    if len(sys.argv) == 2:
        config = replace(config, train=replace(config.train, total_steps=int(sys.argv[1])))

    documents = synthetic_corpus(60_000, seed=config.train.seed)
    tokenizer = train_tokenizer(config, documents)

    print(f'core parameters - {count_parameters(config.model):,}')
    print(f'recursions - {recursion_count(config.model):g}')

    examples, _ = pack_corpus(documents, tokenizer, config.train.row_len)

    with tempfile.TemporaryDirectory() as run_dir:
        result = train_loop(config.model, config.train, examples, tokenizer.pad_id, run_dir)
        print(f'trained {result.steps} steps, final loss {result.metrics[-1]["loss"]:.4f}')
        params = load_checkpoint(result.checkpoint).parameters(use_ema=True)

    print()
    for document in synthetic_corpus(4, seed=1234):
        generated = decode_document(document, tokenizer, config.model, params, config.decode)
        print(f'{document.instruction!r} -> {generated!r} (expected {document.response!r})')

    probe = depth_probe(examples[0].token_ids, examples[0].prefix_len, config.model, params)
    print()
    print('block diff norms -', ' '.join(f'{value:.3f}' for value in probe.diff_norms))
    print('logit lens KL -', ' '.join(f'{value:.3f}' for value in probe.kl))


if __name__ == '__main__':
    main()
