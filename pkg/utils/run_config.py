"""
Run configuration: JSON config sections, dataclass building with unknown-key rejection,
CLI override precedence and named seed substreams
"""

import dataclasses
import hashlib
import json
import logging
import typing
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union

from utils.tensor_io import write_json

logger = logging.getLogger(__name__)

COMMANDS = ("dataset-synth", "train", "sample", "eval", "ablate", "render")

T = TypeVar("T")


class ConfigError(ValueError):
    """Invalid or unknown configuration key"""


def derive_seed(seed: int, *names: Union[str, int]) -> int:
    """
    Derive an independent 63-bit seed for a named substream

    Args:
        seed (int): Root seed (the single --seed of an invocation)
        *names: Substream path, e.g. ('train', 'noise', step)

    Returns:
        int: Derived seed
    """
    key = ":".join([str(int(seed))] + [str(n) for n in names])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def load_run_config(path: Optional[Union[str, Path]]) -> Dict[str, Dict[str, Any]]:
    """
    Read a JSON config file with one flat section per command

    Returns:
        dict: command -> section (empty when no file is given)
    """
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold an object of command sections")
    for key, section in data.items():
        if key not in COMMANDS:
            raise ConfigError(f"Unknown config section '{key}', expected one of {list(COMMANDS)}")
        if not isinstance(section, dict):
            raise ConfigError(f"Config section '{key}' must be an object")
    return data


def merge_overrides(section: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """File values overridden by every CLI flag that was actually given (not None)"""
    merged = dict(section)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def build_config(cls: Type[T], data: Optional[Mapping[str, Any]], prefix: str = "") -> T:
    """
    Build a (nested) dataclass from a mapping, rejecting unknown keys

    Args:
        cls: Dataclass type
        data: Values; missing keys keep their defaults
        prefix (str): Dotted path used in error messages

    Returns:
        Instance of cls
    """
    data = dict(data or {})
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)

    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"Unknown config key '{dotted}'")
        hint = hints.get(key)
        if _is_dataclass_type(hint) and isinstance(value, Mapping):
            value = build_config(hint, value, prefix=f"{dotted}.")
        kwargs[key] = value

    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value in config '{prefix or cls.__name__}': {e}") from e


def config_to_dict(config: Any) -> Any:
    """Dataclass (possibly nested) -> JSON-compatible dict"""
    if dataclasses.is_dataclass(config) and not isinstance(config, type):
        return {f.name: config_to_dict(getattr(config, f.name)) for f in dataclasses.fields(config)}
    if isinstance(config, (list, tuple)):
        return [config_to_dict(v) for v in config]
    if isinstance(config, dict):
        return {k: config_to_dict(v) for k, v in config.items()}
    if isinstance(config, Path):
        return str(config)
    return config


def write_effective_config(out_dir: Union[str, Path], command: str, config: Any) -> Path:
    """Echo the effective config of a run into its output directory"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = write_json(out_dir / "effective_config.json", {"command": command, "config": config_to_dict(config)})
    logger.debug(f"Effective config written to {path}")
    return path
