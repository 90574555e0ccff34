"""
Run configuration: YAML file with model, train, decode and mixture sections
"""


import logging
import os
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from pathlib import Path

import yaml

from hrm_text import records
from hrm_text.data import MixtureSpec
from hrm_text.errors import ConfigError
from hrm_text.inference import DecodeConfig
from hrm_text.model import ModelConfig
from hrm_text.trainer import TrainConfig


logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = 'HRM_TEXT_OUTPUT_ROOT'
DEFAULT_OUTPUT_ROOT = 'runs'

SECTIONS = {
    'model': ModelConfig,
    'train': TrainConfig,
    'decode': DecodeConfig,
    'mixture': MixtureSpec,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    mixture: MixtureSpec = field(default_factory=MixtureSpec)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate(self.model)
        self.decode.validate()
        self.mixture.validate()

    def to_record(self) -> dict:
        return {name: records.to_record(getattr(self, name)) for name in SECTIONS}

    def with_seed(self, seed: int) -> 'RunConfig':
        return replace(self, train=replace(self.train, seed=seed), mixture=replace(self.mixture, seed=seed))


def parse_run_config(values: dict | None) -> RunConfig:
    values = values or {}
    if not isinstance(values, dict):
        raise ConfigError('config', 'top level must be a mapping')
    unknown = sorted(set(values) - set(SECTIONS))
    if unknown:
        raise ConfigError(unknown[0], 'unknown section')
    sections = {name: records.from_record(cls, values.get(name), name) for name, cls in SECTIONS.items()}
    config = RunConfig(**sections)
    config.validate()
    return config


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding='utf-8') as handle:
            values = yaml.safe_load(handle)
    except yaml.YAMLError as error:
        raise ConfigError(str(path), f'invalid YAML: {error}') from None
    except OSError as error:
        raise ConfigError(str(path), error.strerror or 'cannot read') from None
    return parse_run_config(values)


def dump_run_config(config: RunConfig, path) -> None:
    with open(path, 'w', encoding='utf-8') as handle:
        yaml.safe_dump(config.to_record(), handle, sort_keys=False)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))
