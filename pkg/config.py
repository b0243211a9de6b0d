"""Flat ``key=value`` configuration and seed stream splitting.

Precedence, lowest first: dataclass defaults, config file, ``DPGDIFF_<KEY>``
environment variables, ``--set key=value`` flags.
"""

import dataclasses
import logging
import os
import types
import typing

import numpy as np

logger = logging.getLogger("dpgdiff_logger")

ENV_PREFIX = "DPGDIFF_"

# Random stream ids: rng = default_rng([seed, STREAM, *counters])
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_STEP = 3
STREAM_AUGMENT = 4
STREAM_SAMPLE = 5
STREAM_NEGATIVES = 6
STREAM_NOISE = 7
STREAM_SYNTHETIC = 8


def stream(seed, purpose, *counters):
    """Random generator that depends only on (seed, purpose, counters)."""
    return np.random.default_rng([int(seed), int(purpose), *[int(c) for c in counters]])


def read_config_file(path):
    """Parse a flat key=value file into a dict of raw strings."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found at {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def parse_overrides(pairs):
    """Turn ``["lr=0.01", "epochs=3"]`` into a dict."""
    values = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def env_overrides(keys):
    values = {}
    for key in keys:
        env_key = ENV_PREFIX + key.upper().replace("+", "_")
        if env_key in os.environ:
            values[key] = os.environ[env_key]
    return values


def _coerce(raw, field_type, key):
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(field_type)
    args = typing.get_args(field_type)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ("none", ""):
            return None
        field_type = next(a for a in args if a is not type(None))
        origin = typing.get_origin(field_type)
        args = typing.get_args(field_type)
    try:
        if field_type is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if field_type is int:
            return int(raw)
        if field_type is float:
            return float(raw)
        if origin is tuple:
            return tuple(args[0](part) for part in raw.split(","))
        return raw
    except ValueError:
        raise ValueError(f"Config key {key!r}: cannot read {raw!r} as {field_type}") from None


def apply_values(instance, values, strict=True):
    """Return a copy of a config dataclass with ``values`` applied.

    Keys not naming a field are an error when ``strict``; otherwise ignored,
    which lets one flat file carry model, training and eval keys together.
    """
    hints = typing.get_type_hints(type(instance))
    names = {f.name for f in dataclasses.fields(instance)}
    updates = {}
    for key, raw in values.items():
        if key not in names:
            if strict:
                raise ValueError(f"Unknown config key {key!r} for {type(instance).__name__}")
            continue
        updates[key] = _coerce(raw, hints[key], key)
    return dataclasses.replace(instance, **updates)


def load_configs(defaults, path=None, overrides=None):
    """Build every config in ``defaults`` from one flat file plus overrides.

    ``defaults`` is a list of dataclass instances sharing one key namespace.
    """
    values = read_config_file(path) if path else {}
    all_keys = set()
    for instance in defaults:
        all_keys.update(f.name for f in dataclasses.fields(instance))
    values.update(env_overrides(all_keys))
    values.update(overrides or {})

    unknown = set(values) - all_keys
    if unknown:
        raise ValueError(f"Unknown config keys: {', '.join(sorted(unknown))}")

    built = [apply_values(instance, values, strict=False) for instance in defaults]
    for instance in built:
        validate = getattr(instance, "validate", None)
        if validate:
            validate()
    return built


def config_dict(*instances):
    merged = {}
    for instance in instances:
        merged.update(dataclasses.asdict(instance))
    return merged


def write_config_file(path, *instances):
    """Write configs back out in the same flat format, keys sorted."""
    merged = config_dict(*instances)
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(merged):
            value = merged[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            f.write(f"{key}={value}\n")
