import dataclasses
import hashlib
import json
import typing
from typing import Any, Dict, Type, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    """Raised for unreadable config files, unknown keys and invalid values."""


def from_dict(cls: Type[T], data: Dict[str, Any], where: str = "") -> T:
    """Build a (possibly nested) config dataclass from a plain dict.

    Keys missing from `data` keep the dataclass defaults; unknown keys are an
    error so typos in config files do not silently fall back to defaults.
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown key(s) {', '.join(unknown)}")

    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = from_dict(hint, value, path)
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or cls.__name__}: {e}") from e


def to_dict(config) -> Dict[str, Any]:
    """Plain-JSON view of a config dataclass (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(config), default=_json_default))


def config_digest(config) -> str:
    payload = config if isinstance(config, dict) else to_dict(config)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _json_default(value):
    if hasattr(value, "name"):
        return value.name.lower()
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"Cannot serialize {type(value).__name__}")
