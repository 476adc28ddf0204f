"""Run manifests and configuration precedence shared by the management commands."""

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from django.conf import settings
from django.utils import timezone

from . import __version__
from .exceptions import ConfigError
from .representation import FrameGrid

MANIFEST_SUFFIX = ".run.json"


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int
    version: str = __version__
    timestamp: str = field(default_factory=lambda: timezone.now().isoformat())

    def write(self, out_dir):
        """Atomically write <out_dir>/<command>.run.json."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{self.command}{MANIFEST_SUFFIX}"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def defaults():
    return settings.PIANO_SYNTH


def read_config_file(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def config_section(config_file, name):
    """One section (`grid`, `train`, ...) of a JSON config file, {} when absent."""
    values = read_config_file(config_file).get(name, {})
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' of {config_file} must be a JSON object")
    return values


def resolve_config(base, file_values=None, flags=None):
    """base < config file values < flags; flags left at None do not override."""
    resolved = dict(base)
    file_values = file_values or {}
    unknown = set(file_values) - set(base)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    resolved.update(file_values)
    resolved.update({k: v for k, v in (flags or {}).items() if v is not None})
    return resolved


def resolve_grid(config_file=None, flags=None):
    config = resolve_config(defaults()["GRID"], config_section(config_file, "grid"), flags)
    return FrameGrid(**config)


def resolve_path(path, workdir=None):
    """Relative paths live under --workdir (PIANO_SYNTH['WORKDIR'] by default)."""
    path = Path(path)
    if path.is_absolute():
        return path
    return Path(workdir or defaults()["WORKDIR"]) / path
