import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from hrm_text import tensor as T
from hrm_text.config import load_run_config
from hrm_text.data import pack_corpus
from hrm_text.diagnostics import DepthProbe
from hrm_text.diagnostics import Granularity
from hrm_text.diagnostics import depth_probe
from hrm_text.inference import evaluate_exact_match
from hrm_text.inference import evaluate_nll
from hrm_text.model import ModelConfig
from hrm_text.model import Parameters
from hrm_text.model import Variant
from hrm_text.model import forward
from hrm_text.model import init_parameters
from hrm_text.objective import attention_entropy
from hrm_text.objective import build_causal_mask
from hrm_text.objective import response_nll
from hrm_text.synthetic import synthetic_corpus
from hrm_text.tokenizer import bpe_train
from hrm_text.trainer import AttentionMode
from hrm_text.trainer import Objective
from hrm_text.trainer import TrainConfig
from hrm_text.trainer import train_loop


ROOT = Path(__file__).resolve().parent.parent

TOKENS = np.array([3, 1, 4, 1, 5, 9])
PREFIX_LEN = 3


def test_zero_query_entropy_orders_prefixlm_above_causal(double, tiny_config, tiny_params):
    # with W_q = 0 every allowed key gets the same weight
    params = Parameters({
        name: T.Tensor(np.zeros_like(tensor.data)) if name.endswith('attn.wq') else tensor
        for name, tensor in tiny_params.items()
    })
    with T.no_grad():
        _, prefix_trace = forward(TOKENS, PREFIX_LEN, tiny_config, params, record_attention=True)
        _, causal_trace = forward(TOKENS, PREFIX_LEN, tiny_config, params, mask=build_causal_mask(6), record_attention=True)

    prefix = attention_entropy(prefix_trace.attention_by_layer())
    causal = attention_entropy(causal_trace.attention_by_layer())
    np.testing.assert_allclose(prefix, np.mean(np.log([3, 3, 3, 4, 5, 6])), atol=1e-12)
    np.testing.assert_allclose(causal, np.mean(np.log([1, 2, 3, 4, 5, 6])), atol=1e-12)
    assert np.all(prefix > causal)


@pytest.mark.slow
def test_full_model_gradients_match_finite_differences(double, tiny_config, tiny_params):
    loss_mask = np.arange(len(TOKENS)) >= PREFIX_LEN

    def loss():
        logits, _ = forward(TOKENS, PREFIX_LEN, tiny_config, tiny_params)
        return response_nll(logits, TOKENS, loss_mask)

    trainable = list(tiny_params.trainable().values())
    # every entry of every trainable tensor
    assert T.gradcheck(loss, trainable) < 1e-6


@pytest.mark.slow
def test_tiny_run_learns_the_copy_task():
    config = load_run_config(ROOT / 'example' / 'tiny.yaml')
    documents = synthetic_corpus(4000, seed=0, min_len=3, max_len=3)
    heldout = synthetic_corpus(60, seed=1, min_len=3, max_len=3)
    tokenizer = bpe_train([document.instruction + ' ' + document.response for document in documents], config.model.vocab_size)

    examples, rejected = pack_corpus(documents, tokenizer, config.train.row_len)
    held_examples, _ = pack_corpus(heldout, tokenizer, config.train.row_len)
    assert not rejected
    # enough passes over the corpus to fill every step
    epochs = math.ceil(config.train.total_steps * config.train.batch_tokens / sum(map(len, examples))) + 2

    started = time.perf_counter()
    initial = evaluate_nll(held_examples, config.model, init_parameters(config.model, seed=config.train.seed))
    result = train_loop(config.model, config.train, examples * epochs, tokenizer.pad_id)
    trained = evaluate_nll(held_examples, config.model, result.params)
    score = evaluate_exact_match(heldout, tokenizer, config.model, result.params, config.decode)
    elapsed = time.perf_counter() - started

    assert result.steps == config.train.total_steps
    assert not result.stopped_early
    assert trained < initial - 0.5
    losses = [record['loss'] for record in result.metrics]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert score >= 0.95
    assert elapsed < 600


OBJECTIVE_RUNS = {
    'full': (Objective.FULL, AttentionMode.CAUSAL),
    'causal': (Objective.RESPONSE, AttentionMode.CAUSAL),
    'prefixlm': (Objective.RESPONSE, AttentionMode.PREFIXLM),
}


@pytest.mark.slow
def test_response_only_prefixlm_gives_the_lowest_heldout_nll():
    documents = synthetic_corpus(1200, seed=0)
    heldout = synthetic_corpus(60, seed=1)
    tokenizer = bpe_train([document.instruction + ' ' + document.response for document in documents], 300)
    model = ModelConfig(d_model=16, layers_per_module=1, head_dim=8, vocab_size=300, context_len=32, mlp_multiple=16)
    examples, _ = pack_corpus(documents, tokenizer, model.context_len)
    held_examples, _ = pack_corpus(heldout, tokenizer, model.context_len)

    nll = {name: [] for name in OBJECTIVE_RUNS}
    for seed in (0, 1, 2):
        for name, (objective, attention) in OBJECTIVE_RUNS.items():
            train = TrainConfig(
                peak_lr=3e-3, lr_warmup_steps=10, batch_tokens=256, total_steps=120, k_warmup_steps=20,
                row_len=32, objective=objective, attention=attention, seed=seed
            )
            result = train_loop(model, train, examples * 4, tokenizer.pad_id)
            assert result.steps == train.total_steps
            nll[name].append(evaluate_nll(held_examples, model, result.params, causal=attention is AttentionMode.CAUSAL))

    means = {name: float(np.mean(values)) for name, values in nll.items()}
    assert means['full'] > means['causal'] > means['prefixlm'], nll


@pytest.fixture(scope='module')
def trained_toys():
    """
    Briefly trained HRM, matched-depth standard and looped models, plus a causal HRM
    """
    documents = synthetic_corpus(1200, seed=0)
    tokenizer = bpe_train([document.instruction + ' ' + document.response for document in documents], 300)
    base = ModelConfig(d_model=16, layers_per_module=1, head_dim=8, vocab_size=300, context_len=32, mlp_multiple=16)
    examples, _ = pack_corpus(documents, tokenizer, base.context_len)
    held_examples, _ = pack_corpus(synthetic_corpus(8, seed=1), tokenizer, base.context_len)

    # 8 block applications each
    runs = {
        'hrm': (base, AttentionMode.PREFIXLM),
        'standard': (replace(base, variant=Variant.STANDARD, layers_per_module=base.total_steps), AttentionMode.PREFIXLM),
        'looped': (replace(base, variant=Variant.LOOPED, loop_count=base.total_steps), AttentionMode.PREFIXLM),
        'causal': (base, AttentionMode.CAUSAL),
    }
    toys = {}
    for name, (config, attention) in runs.items():
        train = TrainConfig(
            peak_lr=3e-3, lr_warmup_steps=10, batch_tokens=256, total_steps=80, k_warmup_steps=20,
            row_len=32, attention=attention, seed=0
        )
        toys[name] = (config, train_loop(config, train, examples * 3, tokenizer.pad_id).params)
    return toys, held_examples


def _mean_probe(config, params, examples) -> DepthProbe:
    probes = [depth_probe(example.token_ids, example.prefix_len, config, params, Granularity.BLOCK) for example in examples]
    return DepthProbe(
        diff_norms=np.mean([probe.diff_norms for probe in probes], axis=0),
        cosines=np.mean([probe.cosines for probe in probes], axis=0),
        kl=np.mean([probe.kl for probe in probes], axis=0),
        entropies=np.mean([probe.entropies for probe in probes], axis=0),
        samples=len(probes),
    )


def _late(values: np.ndarray) -> float:
    return float(np.mean(values[len(values) // 2:]))


@pytest.mark.slow
def test_trained_hrm_stays_further_from_its_output_than_a_standard_stack(trained_toys):
    toys, held_examples = trained_toys
    hrm = _mean_probe(*toys['hrm'], held_examples)
    standard = _mean_probe(*toys['standard'], held_examples)

    assert hrm.kl[-1] == 0.0 and standard.kl[-1] == 0.0
    assert _late(hrm.kl[:-1]) > _late(standard.kl[:-1])
    assert _late(hrm.diff_norms) > _late(standard.diff_norms)


@pytest.mark.slow
def test_trained_hrm_blocks_are_less_alike_than_a_looped_stack(trained_toys):
    toys, held_examples = trained_toys
    hrm = _mean_probe(*toys['hrm'], held_examples)
    looped = _mean_probe(*toys['looped'], held_examples)
    assert _late(hrm.cosines) < _late(looped.cosines)


@pytest.mark.slow
def test_trained_prefixlm_attention_is_more_spread_than_causal(trained_toys):
    toys, held_examples = trained_toys
    prefix, causal = [], []
    for example in held_examples:
        tokens = np.asarray(example.token_ids)
        with T.no_grad():
            _, prefix_trace = forward(tokens, example.prefix_len, *toys['hrm'], record_attention=True)
            _, causal_trace = forward(
                tokens, example.prefix_len, *toys['causal'], mask=build_causal_mask(len(tokens)), record_attention=True
            )
        prefix.append(attention_entropy(prefix_trace.attention_by_layer()))
        causal.append(attention_entropy(causal_trace.attention_by_layer()))
    assert np.all(np.mean(prefix, axis=0) > np.mean(causal, axis=0))
