import numpy as np
import pytest

from hrm_text import tensor as T
from hrm_text.model import ModelConfig
from hrm_text.model import init_parameters
from hrm_text.objective import Condition
from hrm_text.objective import PackedExample


@pytest.fixture
def double():
    with T.precision(T.Precision.DOUBLE):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """
    d_model=8 with two heads of 4, two layers per module, H2L3
    """
    return ModelConfig(d_model=8, layers_per_module=2, head_dim=4, vocab_size=16, context_len=32, mlp_multiple=8)


@pytest.fixture
def tiny_params(tiny_config, double):
    return init_parameters(tiny_config, seed=0, precision=64)


def _make_example(prefix, response, condition=Condition.DIRECT):
    tokens = tuple(prefix) + tuple(response)
    mask = tuple(position >= len(prefix) for position in range(len(tokens)))
    return PackedExample(tokens, len(prefix), mask, condition)


@pytest.fixture
def make_example():
    return _make_example


@pytest.fixture
def toy_examples():
    """
    Copy task over ids 1-9 with id 10 as the separator
    """
    generator = np.random.default_rng(7)
    examples = []
    for _ in range(64):
        symbols = [int(value) for value in generator.integers(1, 10, size=3)]
        examples.append(_make_example(symbols + [10], symbols))
    return examples
