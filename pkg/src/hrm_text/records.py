"""
Conversion between config dataclasses and plain records
"""


import dataclasses
import types
import typing
from enum import Enum

from hrm_text.errors import ConfigError


def to_record(section) -> dict:
    record = {}
    for field in dataclasses.fields(section):
        value = getattr(section, field.name)
        if isinstance(value, Enum):
            value = value.value
        elif isinstance(value, tuple):
            value = list(value)
        record[field.name] = value
    return record


def _coerce(field_path: str, annotation, value):
    origin = typing.get_origin(annotation)

    if origin in (typing.Union, types.UnionType):
        options = [option for option in typing.get_args(annotation) if option is not type(None)]
        if value is None:
            return None
        return _coerce(field_path, options[0], value)

    if isinstance(annotation, type) and issubclass(annotation, Enum):
        try:
            return annotation(value)
        except ValueError:
            choices = ', '.join(str(member.value) for member in annotation)
            raise ConfigError(field_path, f'"{value}" is not one of {choices}') from None

    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(field_path, f'expected a boolean, got {value!r}')
        return value

    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(field_path, f'expected an integer, got {value!r}')
        return int(value)

    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(field_path, f'expected a number, got {value!r}')
        return float(value)

    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(field_path, f'expected a string, got {value!r}')
        return value

    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(field_path, f'expected a list, got {value!r}')
        (item_type, *_) = typing.get_args(annotation)
        return tuple(_coerce(field_path, item_type, item) for item in value)

    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(field_path, f'expected a mapping, got {value!r}')
        key_type, value_type = typing.get_args(annotation)
        return {
            _coerce(field_path, key_type, key): _coerce(f'{field_path}.{key}', value_type, item)
            for key, item in value.items()
        }

    return value


def from_record(cls, values: dict | None, section: str):
    """
    Builds a config dataclass, rejecting unknown keys with a field-level error
    """
    values = values or {}
    if not isinstance(values, dict):
        raise ConfigError(section, 'expected a mapping')

    hints = typing.get_type_hints(cls)
    fields = {field.name for field in dataclasses.fields(cls) if field.init}
    unknown = sorted(set(values) - fields)
    if unknown:
        raise ConfigError(f'{section}.{unknown[0]}', 'unknown key')

    kwargs = {name: _coerce(f'{section}.{name}', hints[name], value) for name, value in values.items()}
    instance = cls(**kwargs)
    instance.validate()
    return instance
