"""Flat key=value configuration files.

Keys are namespaced with a dot prefix (sim.dt, pretrain.lr, joint.smoothness,
model.n_points, db.count, online.lr); unknown keys are rejected so typos
fail loudly. Every consumer echoes its fully resolved values into reports
and manifests.
"""

import dataclasses

import numpy as np

from .field import JointTrainConfig
from .pim import PimConfig, PretrainConfig
from .sim import SimConfig

_SECTIONS = {
    "sim": SimConfig,
    "model": PimConfig,
    "pretrain": PretrainConfig,
    "joint": JointTrainConfig,
}


def _parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if "," in text:
        return [_parse_value(part) for part in text.split(",")]
    return text


def parse_kv_text(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def load_config_file(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_kv_text(f.read())


def section_overrides(mapping, section):
    prefix = section + "."
    return {k[len(prefix):]: v for k, v in mapping.items() if k.startswith(prefix)}


def build_config(cls, mapping, section):
    """Instantiate a config dataclass with file overrides applied."""
    overrides = section_overrides(mapping, section)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in overrides.items():
        if name == "camera" and isinstance(value, list):
            value = np.asarray(value, dtype=np.float64)
        kwargs[name] = value
    return cls(**kwargs)


def validate_known_keys(mapping):
    """Reject typo'd sections and, for dataclass-backed sections, typo'd
    field names, regardless of which command consumes the file."""
    for key in mapping:
        if "." not in key:
            raise ValueError(f"config keys are section.name, got {key!r}")
        section, name = key.split(".", 1)
        if section in _SECTIONS:
            names = {f.name for f in dataclasses.fields(_SECTIONS[section])}
            if name not in names:
                raise ValueError(f"unknown {section} config key {name!r}")
        elif section not in ("db", "online", "eval", "scene"):
            raise ValueError(f"unknown config section in key {key!r}")


def echo_config(instance, section):
    """Flat mapping of every field of a config dataclass, defaults included."""
    out = {}
    for f in dataclasses.fields(instance):
        value = getattr(instance, f.name)
        if isinstance(value, np.ndarray):
            value = value.tolist()
        out[f"{section}.{f.name}"] = value
    return out
