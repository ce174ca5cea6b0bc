import dataclasses
import json
import logging
from pathlib import Path

from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)


def load_json_config(path):
    """Read a JSON config file into a dict."""
    path = Path(path)
    try:
        with open(path, 'r') as f:
            config = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", path=str(path))
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}", path=str(path))
    logger.debug("Loaded config %s", path)
    return config


def save_json(data, path):
    # sorted keys + fixed indent keep files byte-identical between runs
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def dataclass_from_dict(cls, data):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return cls(**data)
