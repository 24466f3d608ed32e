"""Strict INI run configuration.

Sections mirror the package modules. Unknown sections or keys are rejected.

    [model]       channels, hidden, embed
    [style]       local_clustering, global_clustering, finch_level
    [trainer]     gamma1, gamma2, alpha, lr, batch_size, local_epochs, ce_on_transferred
    [federation]  clients, sample_frac, rounds, lam, scheme, train_domains,
                  eval_domains, seed, checkpoint_every
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, fields, replace
from typing import Any

from .federation import FederationConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(x) for x in text.replace(" ", "").split(","))


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# (section, key) -> (target, attribute, parser); target is "fed" or "train"
KEYS: dict[tuple[str, str], tuple[str, str, Any]] = {
    ("model", "channels"): ("fed", "channels", int),
    ("model", "hidden"): ("fed", "hidden", int),
    ("model", "embed"): ("fed", "embed", int),
    ("style", "local_clustering"): ("fed", "local_clustering", str),
    ("style", "global_clustering"): ("fed", "global_clustering", str),
    ("style", "finch_level"): ("fed", "finch_level", int),
    ("trainer", "gamma1"): ("train", "gamma1", float),
    ("trainer", "gamma2"): ("train", "gamma2", float),
    ("trainer", "alpha"): ("train", "alpha", float),
    ("trainer", "lr"): ("train", "lr", float),
    ("trainer", "batch_size"): ("train", "batch_size", int),
    ("trainer", "local_epochs"): ("train", "local_epochs", int),
    ("trainer", "ce_on_transferred"): ("train", "ce_on_transferred", _bool),
    ("federation", "clients"): ("fed", "num_clients", int),
    ("federation", "sample_frac"): ("fed", "sample_frac", float),
    ("federation", "rounds"): ("fed", "rounds", int),
    ("federation", "lam"): ("fed", "lam", float),
    ("federation", "scheme"): ("fed", "scheme", str),
    ("federation", "train_domains"): ("fed", "train_domains", _int_list),
    ("federation", "eval_domains"): ("fed", "eval_domains", _int_list),
    ("federation", "seed"): ("fed", "seed", int),
    ("federation", "checkpoint_every"): ("fed", "checkpoint_every", int),
}


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    out: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if (section, key) not in KEYS:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            out.setdefault(section, {})[key] = value
    return out


def build_config(values: dict[str, dict[str, str]], base: FederationConfig | None = None) -> FederationConfig:
    fed_kw: dict[str, Any] = {}
    train_kw: dict[str, Any] = {}
    for section, items in values.items():
        for key, raw in items.items():
            if (section, key) not in KEYS:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            target, attr, parse = KEYS[(section, key)]
            try:
                value = parse(raw) if isinstance(raw, str) else raw
            except ValueError as exc:
                raise ConfigError(f"bad value for '{section}.{key}': {raw!r}") from exc
            (fed_kw if target == "fed" else train_kw)[attr] = value
    base = base or FederationConfig()
    try:
        train = replace(base.train, **train_kw)
        return replace(base, train=train, **fed_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: FederationConfig) -> dict[str, dict[str, Any]]:
    """Every resolved setting grouped by section, for manifests and echoing."""
    fed = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "train"}
    train = asdict(cfg.train)
    out: dict[str, dict[str, Any]] = {}
    for (section, key), (target, attr, _) in KEYS.items():
        source = fed if target == "fed" else train
        value = source[attr]
        out.setdefault(section, {})[key] = list(value) if isinstance(value, tuple) else value
    return out


def config_to_ini(cfg: FederationConfig) -> str:
    lines = []
    for section, items in config_to_dict(cfg).items():
        lines.append(f"[{section}]")
        for key, value in items.items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def variant_of(cfg: FederationConfig) -> dict[str, Any]:
    t = cfg.train
    if t.gamma1 == 0 and t.gamma2 == 0:
        mode = "baseline"
    elif cfg.local_clustering == "finch" and cfg.global_clustering == "finch" and t.gamma1 > 0:
        mode = "full"
    else:
        mode = "ablation"
    return {
        "mode": mode,
        "local_clustering": cfg.local_clustering,
        "global_clustering": cfg.global_clustering,
        "triplet": t.gamma1 > 0,
        "regularizer": t.gamma2 > 0,
    }
