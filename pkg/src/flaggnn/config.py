"""Flat key=value config files with [data]/[model]/[strategy]/[optimizer]/[train] sections.

Keys are unique across sections, so overrides may name a key bare
(``M=8``) or qualified (``strategy.M=8``). Relative data paths resolve
against the config file's directory.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict
from pathlib import Path

from flaggnn.augment import StrategyConfig
from flaggnn.errors import ConfigError
from flaggnn.train import DataSpec, ModelSpec, OptimizerConfig, TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _int_list(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _path(text: str) -> str:
    return text.strip()


SCHEMA = {
    "data": {"graph": _path, "features": _path, "labels": _path, "split": _path, "noise_sigma": float},
    "model": {"arch": str, "hidden": _int_list, "dropout": float, "emb_dim": int, "readout": str},
    "strategy": {"strategy": str, "M": int, "alpha_l": float, "alpha_u": _optional_float,
                 "epsilon": _optional_float, "norm": str},
    "optimizer": {"optimizer": str, "lr": float, "beta1": float, "beta2": float, "eps_hat": float,
                  "weight_decay": float},
    "train": {"epochs": int, "seed": int, "free_budget": _bool, "eval_every": int},
}
_SECTION_OF = {key: sec for sec, keys in SCHEMA.items() for key in keys}
_PATH_KEYS = ("graph", "features", "labels", "split")


def _resolve_key(name: str) -> tuple[str, str]:
    if "." in name:
        sec, key = name.split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown config key {name!r}")
        return sec, key
    if name not in _SECTION_OF:
        raise ConfigError(f"unknown config key {name!r}")
    return _SECTION_OF[name], name


def parse_config(text: str, overrides=(), base_dir=None) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    raw: dict[tuple[str, str], str] = {}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, value in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown config key {sec}.{key}")
            raw[(sec, key)] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        name, value = item.split("=", 1)
        raw[_resolve_key(name.strip())] = value.strip()

    values: dict[str, dict] = {sec: {} for sec in SCHEMA}
    for (sec, key), text_value in raw.items():
        try:
            values[sec][key] = SCHEMA[sec][key](text_value)
        except ValueError as e:
            raise ConfigError(f"{sec}.{key}: {e}") from None
    if base_dir is not None:
        for key in _PATH_KEYS:
            p = values["data"].get(key)
            if p is not None and not Path(p).is_absolute():
                values["data"][key] = str(Path(base_dir) / p)
    return _build(values)


def _build(v: dict) -> TrainConfig:
    s = dict(v["strategy"])
    try:
        strategy = StrategyConfig(kind=s.pop("strategy", "clean"), norm_mode=s.pop("norm", "sign"), **s)
        o = dict(v["optimizer"])
        optimizer = OptimizerConfig(name=o.pop("optimizer", "adam"), **o)
        return TrainConfig(strategy=strategy, optimizer=optimizer, model=ModelSpec(**v["model"]),
                           data=DataSpec(**v["data"]), **v["train"])
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def load_config(path, overrides=()) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, overrides, base_dir=path.parent)


def config_echo(cfg: TrainConfig) -> dict:
    """Flat {key: value} view using the config-file key names."""
    st = cfg.strategy
    flat = {
        "strategy": st.kind, "M": st.M, "alpha_l": st.alpha_l, "alpha_u": st.alpha_u,
        "epsilon": st.epsilon, "norm": st.norm_mode,
        "optimizer": cfg.optimizer.name,
        **{k: val for k, val in asdict(cfg.optimizer).items() if k != "name"},
        "epochs": cfg.epochs, "seed": cfg.seed, "free_budget": cfg.free_budget,
        "eval_every": cfg.eval_every,
        **asdict(cfg.model), **asdict(cfg.data),
    }
    flat["hidden"] = list(cfg.model.hidden)
    return flat


def dump_config(cfg: TrainConfig) -> str:
    """Render a config back to file syntax (round-trips through parse_config)."""
    flat = config_echo(cfg)
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key in keys:
            value = flat[key]
            if value is None:
                if key in _PATH_KEYS:
                    continue
                value = "none"
            elif isinstance(value, list):
                value = ",".join(str(x) for x in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
