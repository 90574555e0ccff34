from pathlib import Path

import pytest

from hrm_text.config import RunConfig
from hrm_text.config import dump_run_config
from hrm_text.config import load_run_config
from hrm_text.config import output_root
from hrm_text.config import parse_run_config
from hrm_text.data import MixtureSpec
from hrm_text.errors import ConfigError
from hrm_text.inference import DecodeConfig
from hrm_text.model import ModelConfig
from hrm_text.model import NormStyle
from hrm_text.model import Variant
from hrm_text.trainer import Objective
from hrm_text.trainer import TrainConfig


ROOT = Path(__file__).resolve().parent.parent


def _field_of(values):
    with pytest.raises(ConfigError) as error:
        parse_run_config(values)
    return error.value.field


def test_full_scale_config_matches_preset():
    config = load_run_config(ROOT / 'configs' / 'full_scale.yaml')
    assert config.model == ModelConfig.full_scale()
    assert config.train == TrainConfig.full_scale()
    assert config.decode == DecodeConfig()
    assert config.mixture == MixtureSpec.full_scale()


def test_tiny_example_config():
    config = load_run_config(ROOT / 'example' / 'tiny.yaml')
    assert config.model.d_model == 64
    assert config.model.n_heads == 4
    assert config.train.resolved_k_warmup_steps == 80
    assert config.model.vocab_size == 300
    assert config.mixture.small_multiplier == 1


def test_empty_document_gives_defaults():
    assert parse_run_config(None) == RunConfig()


def test_unknown_key_and_section():
    assert _field_of({'model': {'bogus': 1}}) == 'model.bogus'
    assert _field_of({'trainer': {}}) == 'trainer'


def test_enum_coercion():
    config = parse_run_config({'model': {'variant': 'looped', 'norm_style': 'postnorm'}, 'train': {'objective': 'full'}})
    assert config.model.variant is Variant.LOOPED
    assert config.model.norm_style is NormStyle.POSTNORM
    assert config.train.objective is Objective.FULL
    assert _field_of({'model': {'variant': 'deep'}}) == 'model.variant'


def test_type_checks():
    assert _field_of({'train': {'total_steps': 2.5}}) == 'train.total_steps'
    assert _field_of({'model': {'train_z_l0': 'yes'}}) == 'model.train_z_l0'
    assert _field_of({'decode': {'grid': 0.1}}) == 'decode.grid'
    assert parse_run_config({'train': {'total_steps': 10.0}}).train.total_steps == 10


def test_cross_section_validation():
    # the default HRM runs 8 module steps
    assert _field_of({'train': {'k_end': 9}}) == 'train.k_end'
    assert _field_of({'model': {'head_dim': 3}}) == 'model.head_dim'
    assert _field_of({'mixture': {'task_caps': {'flan': -1}}}) == 'mixture.task_caps.flan'
    assert _field_of({'decode': {'temperature': 0.7}}) == 'decode.temperature'


def test_dump_and_reload(tmp_path):
    config = parse_run_config({
        'model': {'d_model': 64, 'head_dim': 16, 'variant': 'standard'},
        'train': {'no_decay': ['embed']},
        'mixture': {'upsample': {'tiny': 3}},
    })
    path = tmp_path / 'config.yaml'
    dump_run_config(config, path)
    assert load_run_config(path) == config


def test_unreadable_files(tmp_path):
    broken = tmp_path / 'broken.yaml'
    broken.write_text('model: [unclosed\n')
    with pytest.raises(ConfigError, match='invalid YAML'):
        load_run_config(broken)
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / 'missing.yaml')


def test_with_seed():
    config = RunConfig().with_seed(7)
    assert config.train.seed == 7
    assert config.mixture.seed == 7


def test_output_root(monkeypatch, tmp_path):
    monkeypatch.delenv('HRM_TEXT_OUTPUT_ROOT', raising=False)
    assert output_root() == Path('runs')
    monkeypatch.setenv('HRM_TEXT_OUTPUT_ROOT', str(tmp_path))
    assert output_root() == tmp_path
