"""Flat key = value run configuration with per-command sections.

A config file groups keys under [section] headers, one section per CLI
command.  Values are strings until resolved against the command's schema,
which supplies types and defaults; unknown sections or keys are errors.
Command-line flags override file values.  The sha256 hash of the
canonicalized file content plus the root seed identifies an experiment:
every artifact embeds it, and evaluation refuses to mix artifacts whose
hashes differ.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

__all__ = [
    "COMMAND_SCHEMAS",
    "ConfigError",
    "config_hash",
    "load_config",
    "parse_config_text",
    "resolve",
]


class ConfigError(Exception):
    """Invalid configuration: unknown keys, bad types, missing files."""


def _parse_floats(text: str) -> list:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _parse_ints(text: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "floats": _parse_floats,
    "ints": _parse_ints,
    "path": str,
}

# Each schema entry is key -> (type, default).  A default of `...` marks a
# required key.
COMMAND_SCHEMAS = {
    "generate": {
        "k": ("int", 2),
        "side": ("int", 10),
        "n_train": ("int", 10000),
        "n_test": ("int", 1000),
        "pi": ("floats", None),
        "b": ("float", 0.1),
        "family": ("str", "ridges"),
        "pool_size": ("int", 3000),
        "test_fraction": ("float", 0.2),
        "images": ("path", None),
        "labels": ("path", None),
        "labels_subset": ("ints", None),
    },
    "pretrain": {
        "pool": ("path", ...),
        "z": ("int", 4),
        "hidden": ("ints", None),
        "epochs": ("int", 300),
        "batch": ("int", 32),
        "lr": ("float", 1e-4),
        "lr_decay": ("float", 2e-4),
        "fraction": ("float", 1.0),
        "m": ("int", 1),
        "b_init": ("float", 1.0),
    },
    "train": {
        "data": ("path", ...),
        "experts": ("path", ...),
        "epochs": ("int", 100),
        "m": ("int", 100),
        "batch": ("int", 8),
        "lr": ("float", 2e-4),
        "lr_decay": ("float", 2e-4),
        "schedule": ("str", "fixed"),
        "pi_init": ("floats", None),
        "b_init": ("float", 1.0),
        "hidden": ("ints", None),
        "checkpoint_every": ("int", 1),
    },
    "infer": {
        "model": ("path", ...),
        "data": ("path", ...),
        "m": ("int", 100),
        "chunk": ("int", 128),
        "reconstructions": ("bool", False),
    },
    "eval": {
        "model": ("path", None),
        "predictions": ("path", None),
        "data": ("path", ...),
        "m": ("int", 100),
        "runs": ("int", 1),
        "overlap_only": ("bool", False),
        "ssim_window": ("int", 7),
        "chunk": ("int", 128),
    },
}


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Parse [section] / key = value lines into nested string dicts."""
    sections: dict = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in COMMAND_SCHEMAS:
                raise ConfigError(
                    f"{origin}:{lineno}: unknown section [{current}]; "
                    f"expected one of {sorted(COMMAND_SCHEMAS)}"
                )
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got {line!r}")
        if current is None:
            raise ConfigError(f"{origin}:{lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if key not in COMMAND_SCHEMAS[current]:
            raise ConfigError(
                f"{origin}:{lineno}: unknown key {key!r} in [{current}]; "
                f"known keys: {sorted(COMMAND_SCHEMAS[current])}"
            )
        sections[current][key] = value
    return sections


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), origin=str(path))


def resolve(command: str, file_sections: dict, overrides: dict) -> dict:
    """Merge defaults, config-file values and CLI overrides for one command."""
    schema = COMMAND_SCHEMAS[command]
    unknown = sorted(set(overrides) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {unknown}")
    out = {}
    file_values = file_sections.get(command, {})
    for key, (kind, default) in schema.items():
        if key in overrides and overrides[key] is not None:
            raw = overrides[key]
        elif key in file_values:
            raw = file_values[key]
        else:
            if default is ...:
                raise ConfigError(f"missing required key {key!r} for {command}")
            out[key] = default
            continue
        if isinstance(raw, str):
            try:
                out[key] = _PARSERS[kind](raw)
            except ConfigError:
                raise
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {command}.{key}: {raw!r} (expected {kind})") from None
        else:
            out[key] = raw
    return out


def config_hash(file_sections: dict, seed: int) -> str:
    """Identity of an experiment: canonical config content plus the seed."""
    lines = [f"seed={int(seed)}"]
    for section in sorted(file_sections):
        lines.append(f"[{section}]")
        for key in sorted(file_sections[section]):
            lines.append(f"{key}={file_sections[section][key]}")
    digest = hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
    return digest[:16]
