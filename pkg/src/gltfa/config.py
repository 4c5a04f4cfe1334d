"""Flat key-value configuration files with dotted keys.

The format is one ``section.field = value`` assignment per line, with
``#`` comments; keys mirror the PriorConfig (``prior.*``) and ChainConfig
(``chain.*``) field names, e.g.::

    prior.esp_family = 2PB
    prior.slab_family = fractional
    chain.k = 7
    chain.seed = 42

Values are parsed against the dataclass field types; unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses

from .model import ModelError, PriorConfig
from .sampler import ChainConfig

__all__ = ["ConfigError", "parse_config_text", "load_config_file",
           "apply_overrides", "config_to_dict", "config_from_dict"]


class ConfigError(ModelError):
    pass


_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


def _coerce(raw: str, current):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(current, bool):
        if raw.lower() not in _BOOL:
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, str) or current is None:
        # None-default fields are numeric or string switches; try numbers first
        try:
            return int(raw)
        except ValueError:
            pass
        try:
            return float(raw)
        except ValueError:
            return raw
    raise ConfigError(f"unsupported config value {raw!r}")


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def apply_overrides(chain: ChainConfig, items: dict[str, str]) -> ChainConfig:
    """Apply ``prior.x``/``chain.x`` assignments onto a ChainConfig."""
    prior_fields = _field_names(PriorConfig)
    chain_fields = _field_names(ChainConfig)
    for key, raw in items.items():
        section, _, name = key.partition(".")
        if not name:
            raise ConfigError(f"key {key!r} is not of the form section.field")
        if section == "prior":
            if name not in prior_fields:
                raise ConfigError(f"unknown prior field {name!r}")
            setattr(chain.prior, name, _coerce(raw, getattr(chain.prior, name)))
        elif section == "chain":
            if name not in chain_fields or name == "prior":
                raise ConfigError(f"unknown chain field {name!r}")
            setattr(chain, name, _coerce(raw, getattr(chain, name)))
        else:
            raise ConfigError(f"unknown config section {section!r}")
    return chain


def parse_config_text(text: str, base: ChainConfig | None = None) -> ChainConfig:
    chain = base if base is not None else ChainConfig(n_draws=1000)
    items = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        items[key.strip()] = raw
    return apply_overrides(chain, items)


def load_config_file(path, base: ChainConfig | None = None) -> ChainConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), base=base)


def config_to_dict(chain: ChainConfig) -> dict:
    out = dataclasses.asdict(chain)
    return out


def config_from_dict(d: dict) -> ChainConfig:
    d = dict(d)
    prior = PriorConfig(**d.pop("prior"))
    return ChainConfig(prior=prior, **d)
