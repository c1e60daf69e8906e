"""Run configuration: the [data], [model], [train] and [eval] sections of one file."""

import configparser
import typing
from datetime import date
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import ConfigError, DataFileError
from datapipe.schemas import SynthSpec
from encoder.schemas import ModelConfig
from evalsuite.schemas import EvalConfig
from trainer.schemas import TrainConfig

SECTIONS: Dict[str, Type[BaseModel]] = {
    "data": SynthSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

NONE_WORDS = ("", "none", "null")


class RunConfig(BaseModel):
    """Everything one pipeline invocation needs; [model] lives under ``train.model``."""

    model_config = ConfigDict(extra="forbid")

    data: SynthSpec = Field(default_factory=SynthSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


def _field_name(section: str, key: str) -> str:
    """Field name for ``key`` (a field name or alias) of ``section``."""
    fields = SECTIONS[section].model_fields
    if section == "train" and key == "model":
        raise ConfigError("train.model is not a key; use the [model] section")
    if key in fields:
        return key
    for name, info in fields.items():
        if info.alias == key:
            return name
    raise ConfigError(f"Unknown configuration key {section}.{key}")


def _coerce(section: str, key: str, raw: Any) -> Any:
    """Turn a config-file string into something the section's model validates."""
    if not isinstance(raw, str):
        return raw
    annotation = SECTIONS[section].model_fields[_field_name(section, key)].annotation
    text = raw.strip()
    if typing.get_origin(annotation) is tuple:
        return tuple(part.strip() for part in text.split(",") if part.strip())
    if type(None) in typing.get_args(annotation) and text.lower() in NONE_WORDS:
        return None
    return text


def _build(sections: Mapping[str, Mapping[str, Any]]) -> RunConfig:
    values = {name: {} for name in SECTIONS}
    for section, entries in sections.items():
        if section not in SECTIONS:
            raise ConfigError(f"Unknown configuration section [{section}]")
        for key, raw in entries.items():
            values[section][_field_name(section, key)] = _coerce(section, key, raw)
    try:
        model = ModelConfig(**values["model"])
        return RunConfig(
            data=SynthSpec(**values["data"]),
            train=TrainConfig(model=model, **values["train"]),
            eval=EvalConfig(**values["eval"]),
        )
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}")


def read_config_sections(path: str) -> Dict[str, Dict[str, str]]:
    """Raw ``key = value`` entries per section, exactly as written in the file."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as e:
        raise DataFileError(f"Cannot read config {path}: {e}")
    except configparser.Error as e:
        raise ConfigError(f"Malformed config {path}: {e}")
    return {section: dict(parser.items(section)) for section in parser.sections()}


def load_run_config(path: Optional[str]) -> RunConfig:
    """Parse a ``key = value`` file with [data]/[model]/[train]/[eval] sections."""
    if path is None:
        return RunConfig()
    return _build(read_config_sections(path))


def _sections_of(config: RunConfig) -> Dict[str, Dict[str, Any]]:
    return {
        "data": config.data.model_dump(),
        "model": config.train.model.model_dump(),
        "train": config.train.model_dump(exclude={"model"}),
        "eval": config.eval.model_dump(),
    }


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """New config with ``{"section.key": value}`` overrides applied on top."""
    if not overrides:
        return config
    sections = _sections_of(config)
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"Override {dotted!r} must look like section.key")
        sections[section][_field_name(section, key)] = value
    return _build(sections)


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, date):
        return value.isoformat()
    return repr(value) if isinstance(value, float) else str(value)


def dump_run_config(config: RunConfig) -> str:
    """The config as file text that ``load_run_config`` reads back to an equal config."""
    lines = []
    for section, entries in _sections_of(config).items():
        lines.append(f"[{section}]")
        fields = SECTIONS[section].model_fields
        for name, value in entries.items():
            key = fields[name].alias or name
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)
