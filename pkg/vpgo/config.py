"""Environment settings, logging setup and YAML experiment configuration."""
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union

import yaml
from pydantic import BaseModel, ValidationError

from vpgo.errors import ConfigError
from vpgo.schemas import RunConfig

# Settings from environment variables
DATA_ROOT = os.getenv("VPGO_DATA_ROOT", "./data")
LOG_LEVEL = os.getenv("VPGO_LOG_LEVEL", "INFO")
DEVICE = os.getenv("VPGO_DEVICE", "cpu")

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"

M = TypeVar("M", bound=BaseModel)


def configure_logging(level: Optional[str] = None) -> None:
    """Install the package log format on the root logger."""
    logging.basicConfig(level=(level or LOG_LEVEL).upper(), format=LOG_FORMAT)


def validate_section(schema: Type[M], data: Union[M, Dict[str, Any], None], section: str = "") -> M:
    """
    Validate a config section, turning pydantic errors into ConfigError.

    Args:
        schema: Pydantic model class of the section
        data: Raw mapping, an existing instance, or None for defaults
        section: Dotted prefix used when naming the offending key

    Returns:
        Validated section instance

    Raises:
        ConfigError: If any field fails validation; `key` names the first one
    """
    if isinstance(data, schema):
        return data
    try:
        return schema.model_validate(data or {})
    except ValidationError as e:
        first = e.errors()[0]
        loc = [str(part) for part in first.get("loc", ())]
        key = ".".join(p for p in [section, *loc] if p) or section or schema.__name__
        raise ConfigError(f"{key}: {first.get('msg')}", key=key) from e


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load a YAML experiment file into a RunConfig.

    Args:
        path: YAML file; None gives the defaults

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: If the file is missing, not a mapping, or fails validation
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", key="config")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"config file is not valid YAML: {e}", key="config") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping", key="config")
    return validate_section(RunConfig, raw)


def with_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides (e.g. {"train.seed": 3}), skipping None values."""
    data = cfg.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return validate_section(RunConfig, data)
