import math

import numpy as np
import pytest

from hrm_text.errors import ContractError
from hrm_text.errors import NonFiniteError
from hrm_text.optim import AdamAtan2
from hrm_text.optim import EmaState
from hrm_text.optim import OptimizerState
from hrm_text.optim import adam_atan2_step
from hrm_text.optim import atan2_update
from hrm_text.optim import ema_update


NO_DECAY = AdamAtan2(weight_decay=0.0)


def _run(params, grads_per_step, lr, hyper):
    state = OptimizerState.zeros_like(params)
    history = [params]
    for grads in grads_per_step:
        params, state = adam_atan2_step(params, grads, state, lr, hyper)
        history.append(params)
    return history, state


def test_zero_gradient_only_decays():
    params = {'w': np.array([1.0, -2.0]), 'embed': np.array([3.0])}
    grads = {'w': np.zeros(2), 'embed': np.zeros(1)}
    new, _ = adam_atan2_step(params, grads, OptimizerState.zeros_like(params), 0.01, AdamAtan2())
    np.testing.assert_allclose(new['w'], params['w'] * (1 - 0.01 * 0.1))
    np.testing.assert_array_equal(new['embed'], params['embed'])


def test_update_is_bounded(rng):
    params = {'w': rng.normal(size=50)}
    steps = [{'w': rng.standard_cauchy(size=50) * 10.0 ** rng.integers(-6, 6)} for _ in range(40)]
    history, _ = _run(params, steps, 0.01, NO_DECAY)
    for before, after in zip(history, history[1:]):
        assert np.abs(after['w'] - before['w']).max() <= 0.01 * math.pi / 2 + 1e-12


def test_gradient_scale_invariance(rng):
    params = {'w': rng.normal(size=20)}
    steps = [{'w': rng.normal(size=20)} for _ in range(5)]
    scaled = [{'w': 10.0 * grads['w']} for grads in steps]
    plain, _ = _run(params, steps, 0.01, AdamAtan2())
    boosted, _ = _run(params, scaled, 0.01, AdamAtan2())
    np.testing.assert_allclose(boosted[-1]['w'], plain[-1]['w'], atol=1e-6)


def test_constant_gradient_fixed_point():
    params = {'w': np.array([0.0, 0.0])}
    steps = [{'w': np.array([0.3, -5.0])}] * 10_000
    history, state = _run(params, steps, 1e-3, NO_DECAY)
    delta = history[-1]['w'] - history[-2]['w']
    np.testing.assert_allclose(np.abs(delta), 1e-3 * math.pi / 4, atol=1e-4 * 1e-3)
    assert state.step == 10_000


def test_atan2_update_shape():
    assert atan2_update(np.array(1.0), np.array(1.0)) == pytest.approx(math.pi / 4)
    assert atan2_update(np.array(0.0), np.array(0.0)) == 0.0


def test_inputs_are_not_mutated(rng):
    params = {'w': rng.normal(size=4)}
    original = params['w'].copy()
    state = OptimizerState.zeros_like(params)
    adam_atan2_step(params, {'w': np.ones(4)}, state, 0.1, AdamAtan2())
    np.testing.assert_array_equal(params['w'], original)
    assert state.step == 0
    np.testing.assert_array_equal(state.m['w'], 0.0)


def test_non_finite_gradient_names_parameter():
    params = {'h.layers.0.attn.wq': np.zeros(2)}
    with pytest.raises(NonFiniteError, match='h.layers.0.attn.wq'):
        adam_atan2_step(params, {'h.layers.0.attn.wq': np.array([np.nan, 0.0])}, OptimizerState(), 0.1, AdamAtan2())


def test_gradient_shape_mismatch():
    with pytest.raises(ContractError):
        adam_atan2_step({'w': np.zeros(2)}, {'w': np.zeros(3)}, OptimizerState(), 0.1, AdamAtan2())


def test_ema_extremes(rng):
    params = {'w': rng.normal(size=3)}
    ema = EmaState.of({'w': np.zeros(3)})
    np.testing.assert_array_equal(ema_update(ema, params, 0.0).shadow['w'], params['w'])
    np.testing.assert_array_equal(ema_update(ema, params, 1.0).shadow['w'], 0.0)


def test_ema_closed_form():
    decay = 0.9999
    ema = EmaState.of({'w': np.array([5.0])})
    for _ in range(100):
        ema = ema_update(ema, {'w': np.array([1.0])}, decay)
    expected = 1.0 + (5.0 - 1.0) * decay ** 100
    assert ema.shadow['w'][0] == pytest.approx(expected, abs=1e-10)


def test_ema_stays_in_hull(rng):
    ema = EmaState.of({'w': np.zeros(4)})
    values = [rng.uniform(-1, 1, size=4) for _ in range(50)]
    for value in values:
        ema = ema_update(ema, {'w': value}, 0.9)
    stacked = np.stack([np.zeros(4)] + values)
    assert np.all(ema.shadow['w'] >= stacked.min(axis=0))
    assert np.all(ema.shadow['w'] <= stacked.max(axis=0))


def test_ema_keeps_float64_and_casts_back():
    ema = EmaState.of({'w': np.zeros(2, dtype=np.float32)})
    assert ema.shadow['w'].dtype == np.float64
    assert ema.arrays({'w': np.zeros(2, dtype=np.float32)})['w'].dtype == np.float32


def test_ema_rejects_bad_decay():
    with pytest.raises(ContractError):
        ema_update(EmaState.of({'w': np.zeros(1)}), {'w': np.zeros(1)}, 1.5)
