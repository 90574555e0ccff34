import itertools
import json
import threading
import time
from dataclasses import replace

import numpy as np
import pytest

from hrm_text.checkpoint import load_checkpoint
from hrm_text.errors import ConfigError
from hrm_text.errors import ContractError
from hrm_text.model import ModelConfig
from hrm_text.trainer import METRIC_KEYS
from hrm_text.trainer import PREFETCH_THREAD
from hrm_text.trainer import AttentionMode
from hrm_text.trainer import Objective
from hrm_text.trainer import TrainConfig
from hrm_text.trainer import assemble_batches
from hrm_text.trainer import lr_schedule
from hrm_text.trainer import mean_horizon
from hrm_text.trainer import pack_batch
from hrm_text.trainer import prefetch
from hrm_text.trainer import tbptt_horizon
from hrm_text.trainer import train_loop


def test_horizon_schedule_endpoints():
    cfg = TrainConfig(k_warmup_steps=1000)
    assert tbptt_horizon(0, cfg) == 2
    assert tbptt_horizon(1000, cfg) == 5
    assert tbptt_horizon(50_000, cfg) == 5
    # 2 + 3 * 0.5 = 3.5 rounds away from zero
    assert tbptt_horizon(500, cfg) == 4


def test_horizon_is_monotone():
    cfg = TrainConfig(k_warmup_steps=37)
    values = [tbptt_horizon(step, cfg) for step in range(100)]
    assert values == sorted(values)
    assert set(values) == {2, 3, 4, 5}


def test_default_warmup_is_a_tenth_of_training():
    assert TrainConfig.full_scale().resolved_k_warmup_steps == 30_518
    assert TrainConfig(total_steps=5).resolved_k_warmup_steps == 1


def test_full_scale_mean_horizon():
    assert mean_horizon(TrainConfig.full_scale()) == pytest.approx(4.85, abs=0.005)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(1000, cfg) == pytest.approx(1.1e-4)
    assert lr_schedule(2000, cfg) == pytest.approx(2.2e-4)
    assert lr_schedule(1_000_000, cfg) == pytest.approx(2.2e-4)
    assert lr_schedule(0, replace(cfg, lr_warmup_steps=0)) == pytest.approx(2.2e-4)


def test_config_validation():
    model = ModelConfig(d_model=8, layers_per_module=1, head_dim=4, vocab_size=16, context_len=32, mlp_multiple=8)
    with pytest.raises(ConfigError) as error:
        TrainConfig(k_end=9).validate(model)
    assert error.value.field == 'train.k_end'
    with pytest.raises(ConfigError):
        TrainConfig(k_start=1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(row_len=64).validate(model)


def test_pack_batch_isolates_examples(make_example):
    first = make_example([1, 2], [3])
    second = make_example([4], [5, 6])
    batch = pack_batch([[first, second]], pad_id=0)

    assert batch.tokens.tolist() == [[1, 2, 3, 4, 5, 6]]
    assert batch.positions.tolist() == [[0, 1, 2, 0, 1, 2]]
    assert batch.segment_ids.tolist() == [[1, 1, 1, 2, 2, 2]]
    assert not batch.mask[0, :3, 3:].any()
    assert not batch.mask[0, 3:, :3].any()
    # PrefixLM inside each example
    assert batch.mask[0, 0, 1]
    assert not batch.mask[0, 1, 2]
    assert batch.n_tokens == 6
    assert batch.n_examples == 2


def test_pack_batch_pads_short_rows(make_example):
    batch = pack_batch([[make_example([1, 2], [3, 4])], [make_example([5], [6])]], pad_id=9)
    assert batch.tokens[1].tolist() == [5, 6, 9, 9]
    assert not batch.loss_mask[1, 2:].any()
    assert batch.mask[1, 2, 2] and not batch.mask[1, 2, :2].any()
    assert batch.n_tokens == 6


def test_full_objective_scores_instruction(make_example):
    example = make_example([1, 2], [3])
    response = pack_batch([[example]], 0, Objective.RESPONSE)
    full = pack_batch([[example]], 0, Objective.FULL, AttentionMode.CAUSAL)
    assert response.loss_mask.tolist() == [[False, False, True]]
    assert full.loss_mask.tolist() == [[True, True, True]]
    assert full.response_mask.tolist() == [[False, False, True]]
    np.testing.assert_array_equal(full.mask[0], np.tril(np.ones((3, 3), dtype=bool)))


def test_assemble_batches_respects_budget(toy_examples):
    batches = list(assemble_batches(toy_examples, batch_tokens=70, row_len=16, pad_id=0))
    assert sum(batch.n_examples for batch in batches) == len(toy_examples)
    assert all(batch.n_tokens <= 70 for batch in batches)
    assert all(batch.tokens.shape[1] <= 16 for batch in batches)
    # 64 examples of 7 tokens, 10 per batch
    assert [batch.n_examples for batch in batches] == [10] * 6 + [4]


def test_assemble_batches_rejects_long_example(make_example):
    with pytest.raises(ContractError):
        list(assemble_batches([make_example([1] * 10, [2] * 10)], 100, 16, 0))


def test_prefetch_preserves_order():
    assert list(prefetch(iter(range(50)), 3)) == list(range(50))
    assert list(prefetch(iter(range(5)), 0)) == list(range(5))


def test_prefetch_propagates_errors():
    def broken():
        yield 1
        raise ValueError('bad batch')

    produced = prefetch(broken(), 2)
    assert next(produced) == 1
    with pytest.raises(ValueError, match='bad batch'):
        next(produced)


def test_prefetch_worker_exits_when_consumer_stops_early():
    produced = prefetch(itertools.count(), 1)
    assert [next(produced), next(produced)] == [0, 1]
    # let the worker block on the full queue
    time.sleep(0.2)
    produced.close()
    alive = [thread for thread in threading.enumerate() if thread.name == PREFETCH_THREAD and thread.is_alive()]
    assert alive == []


def _train(tiny_config, examples, run_dir, **overrides):
    values = dict(
        peak_lr=1e-2, lr_warmup_steps=1, batch_tokens=56, total_steps=4,
        k_warmup_steps=2, row_len=16, seed=3
    )
    values.update(overrides)
    return train_loop(tiny_config, TrainConfig(**values), examples, 0, run_dir)


def test_train_loop_writes_metrics_and_checkpoint(tiny_config, toy_examples, tmp_path):
    result = _train(tiny_config, toy_examples, tmp_path)
    assert result.steps == 4
    assert not result.stopped_early

    lines = (tmp_path / 'metrics.jsonl').read_text().splitlines()
    records = [json.loads(line) for line in lines]
    assert len(records) == 4
    assert all(set(METRIC_KEYS) <= set(record) for record in records)
    assert [record['K'] for record in records] == [2, 4, 5, 5]
    assert records[0]['lr'] == 0.0
    assert all(np.isfinite(record['loss']) for record in records)

    checkpoint = load_checkpoint(result.checkpoint)
    assert checkpoint.metadata['steps'] == 4
    assert set(checkpoint.ema) == set(checkpoint.params)
    np.testing.assert_array_equal(checkpoint.params['head'], result.params['head'].data)


def test_train_loop_is_deterministic(tiny_config, toy_examples, tmp_path):
    _train(tiny_config, toy_examples, tmp_path / 'a')
    _train(tiny_config, toy_examples, tmp_path / 'b')
    assert (tmp_path / 'a' / 'metrics.jsonl').read_bytes() == (tmp_path / 'b' / 'metrics.jsonl').read_bytes()
    assert (tmp_path / 'a' / 'final.ckpt').read_bytes() == (tmp_path / 'b' / 'final.ckpt').read_bytes()


def test_train_loop_stops_when_data_runs_out(tiny_config, toy_examples, caplog):
    result = _train(tiny_config, toy_examples[:16], None, total_steps=10)
    assert result.stopped_early
    # 16 examples of 7 tokens at 8 per batch
    assert result.steps == 2
    assert 'Data exhausted' in caplog.text


def test_train_loop_learns(tiny_config, toy_examples):
    result = _train(tiny_config, toy_examples * 8, None, total_steps=30, batch_tokens=112)
    losses = [record['loss'] for record in result.metrics]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_on_step_callback(tiny_config, toy_examples):
    seen = []
    cfg = TrainConfig(batch_tokens=56, total_steps=2, row_len=16)
    train_loop(tiny_config, cfg, toy_examples, 0, on_step=lambda record: seen.append(record['step']))
    assert seen == [0, 1]
