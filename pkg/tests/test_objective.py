import math

import numpy as np
import pytest

from hrm_text import tensor as T
from hrm_text.errors import ContractError
from hrm_text.errors import EmptyResponseError
from hrm_text.errors import ValidationError
from hrm_text.objective import Condition
from hrm_text.objective import PackedExample
from hrm_text.objective import attention_entropy
from hrm_text.objective import build_causal_mask
from hrm_text.objective import build_prefixlm_mask
from hrm_text.objective import response_nll
from hrm_text.objective import row_entropy
from hrm_text.objective import target_weights
from hrm_text.objective import token_nll


def test_prefixlm_mask_example():
    expected = np.array([
        [1, 1, 0, 0],
        [1, 1, 0, 0],
        [1, 1, 1, 0],
        [1, 1, 1, 1],
    ], dtype=bool)
    np.testing.assert_array_equal(build_prefixlm_mask(2, 4), expected)


def test_causal_is_prefix_zero():
    np.testing.assert_array_equal(build_causal_mask(5), build_prefixlm_mask(0, 5))
    np.testing.assert_array_equal(build_causal_mask(5), np.tril(np.ones((5, 5), dtype=bool)))


def test_full_prefix_is_bidirectional():
    assert build_prefixlm_mask(4, 4).all()


def test_masks_nest():
    for prefix_len in range(6):
        smaller, larger = build_prefixlm_mask(prefix_len, 6), build_prefixlm_mask(prefix_len + 1, 6)
        assert np.all(larger[smaller])
        assert larger.sum() >= smaller.sum()


def test_mask_edge_cases():
    assert build_prefixlm_mask(1, 1).tolist() == [[True]]
    assert int(build_prefixlm_mask(0, 3).sum()) == 6
    assert int(build_prefixlm_mask(3, 3).sum()) == 9


def test_prefix_longer_than_sequence():
    with pytest.raises(ContractError):
        build_prefixlm_mask(5, 4)


def test_target_weights_shift_and_segments():
    loss_mask = np.array([False, False, True, True, True, True, True])
    segments = np.array([1, 1, 1, 1, 2, 2, 2])
    weights = target_weights(loss_mask, segments)
    # position 3 would score position 4, which starts the next segment
    np.testing.assert_array_equal(weights, [False, True, True, False, True, True, False])


def _nll_reference(logits, tokens, weights):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = [log_probs[i, tokens[i + 1]] for i in range(len(tokens) - 1) if weights[i]]
    return -float(np.mean(picked))


def test_all_true_mask_is_full_nll(double, rng):
    logits = rng.normal(size=(5, 7))
    tokens = np.array([1, 2, 3, 4, 5])
    loss = response_nll(T.Tensor(logits), tokens, np.ones(5, dtype=bool))
    assert loss.item() == pytest.approx(_nll_reference(logits, tokens, [True] * 4), abs=1e-12)


def test_uniform_logits_give_log_vocab(double):
    loss = response_nll(T.Tensor(np.zeros((4, 11))), np.array([0, 1, 2, 3]), np.array([False, True, True, True]))
    assert loss.item() == pytest.approx(math.log(11), abs=1e-12)


def test_instruction_logits_do_not_change_loss(double, rng):
    tokens = np.array([1, 2, 3, 4, 5, 6])
    loss_mask = np.arange(6) >= 3
    logits = rng.normal(size=(6, 8))
    perturbed = logits.copy()
    # positions 0 and 1 score instruction tokens; position 5 scores nothing
    perturbed[[0, 1, 5]] += rng.normal(size=(3, 8)) * 10
    a = response_nll(T.Tensor(logits), tokens, loss_mask).item()
    b = response_nll(T.Tensor(perturbed), tokens, loss_mask).item()
    assert a == b


def test_unscored_positions_get_zero_gradient(double, rng):
    tokens = np.array([1, 2, 3, 4, 5, 6])
    logits = T.Tensor(rng.normal(size=(6, 8)), requires_grad=True)
    with T.Tape() as tape:
        loss = response_nll(logits, tokens, np.arange(6) >= 3)
    grad = tape.backward(loss).of(logits)
    assert not grad[[0, 1, 5]].any()
    assert grad[[2, 3, 4]].any()


def test_empty_response_raises(double):
    with pytest.raises(EmptyResponseError):
        response_nll(T.Tensor(np.zeros((3, 4))), np.array([0, 1, 2]), np.zeros(3, dtype=bool))


def test_token_nll_matches_tape_loss(double, rng):
    logits = rng.normal(size=(6, 9))
    tokens = np.array([4, 2, 7, 1, 1, 3])
    loss_mask = np.arange(6) >= 2
    total, count = token_nll(logits, tokens, target_weights(loss_mask))
    assert count == 4
    assert total / count == pytest.approx(response_nll(T.Tensor(logits), tokens, loss_mask).item(), abs=1e-12)


def test_entropy_bounds():
    assert float(row_entropy(np.array([0.0, 1.0, 0.0]))) == 0.0
    assert float(row_entropy(np.full(8, 1 / 8))) == pytest.approx(math.log(8))


def test_attention_entropy_per_layer():
    uniform = np.full((2, 4, 4), 0.25)
    one_hot = np.zeros((2, 4, 4))
    one_hot[..., 0] = 1.0
    entropies = attention_entropy([uniform, one_hot])
    np.testing.assert_allclose(entropies, [math.log(4), 0.0])

    grouped = attention_entropy({'L.0': [uniform, one_hot]})
    np.testing.assert_allclose(grouped, [math.log(4) / 2])


def test_packed_example_validation():
    PackedExample((1, 2, 3), 1, (False, True, True), Condition.COT)
    with pytest.raises(ValidationError):
        PackedExample((1, 2, 3), 1, (False, False, True), Condition.COT)
    with pytest.raises(ValidationError):
        PackedExample((1, 2), 3, (False, False), Condition.COT)


def test_condition_tags():
    assert Condition.DIRECT.tag == '<|direct|>'
    assert [condition.value for condition in Condition] == ['direct', 'cot', 'synth', 'noisy']
