"""Run configuration: TOML file merged under command-line flags.

Top-level keys apply to every subcommand; a ``[<subcommand>]`` table
overrides them for that subcommand. Keys are the long flag names with
dashes replaced by underscores. Explicit flags win over file values.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping, Optional

import tomli


class ConfigError(ValueError):
    pass


def load_config_file(
    path: Optional[str | Path],
    command: str,
    known: Optional[set[str]] = None,
    all_known: Optional[set[str]] = None,
) -> dict[str, Any]:
    """Top-level values merged with the ``[command]`` table.

    Top-level keys that ``command`` does not use are dropped (they may belong
    to another subcommand) unless no subcommand knows them (``all_known``).
    """
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    merged = {k: v for k, v in data.items() if not isinstance(v, dict)}
    if all_known is not None:
        stray = set(merged) - all_known
        if stray:
            raise ConfigError(f"unknown config keys: {sorted(stray)}")
    if known is not None:
        merged = {k: v for k, v in merged.items() if k in known}
    section = data.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: [{command}] must be a table")
    merged.update(section)
    return merged


def resolve(defaults: Mapping[str, Any], file_values: Mapping[str, Any], flags: Mapping[str, Any]) -> dict[str, Any]:
    """defaults < file < explicitly given flags (flags left as None are not given)."""
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(file_values)
    out.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return out


def write_resolved(cfg: Mapping[str, Any], out_dir: str | Path) -> Path:
    path = Path(out_dir) / "config.resolved.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dict(cfg), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path
