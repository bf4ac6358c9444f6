"""INI run configuration with strict key checking.

Sections: ``data``, ``model``, ``train``, ``distill``, ``eval``.  Every key
has a typed default below; unknown sections or keys are rejected so typos
fail loudly.  Precedence is defaults < config file < command-line overrides.
The effective configuration is written next to each run's outputs.
"""

from __future__ import annotations

import configparser
import copy

from .errors import ConfigError


def _range_pair(text):
    parts = str(text).split(":")
    if len(parts) != 2:
        raise ConfigError(f"expected lo:hi range, got {text!r}")
    try:
        lo, hi = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"expected integer range, got {text!r}") from None
    if lo > hi or lo < 0:
        raise ConfigError(f"invalid range {text!r}")
    return (lo, hi)


def _int_list(text):
    try:
        return tuple(int(p) for p in str(text).split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _bool(text):
    if isinstance(text, bool):
        return text
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise ConfigError(f"expected boolean, got {text!r}") from None


# key -> (parser, default)
SCHEMA = {
    "data": {
        "dir": (str, "data"),
        "classes": (int, 8),
        "width": (int, 64),
        "height": (int, 64),
        "num_dense": (int, 200),
        "num_sparse": (int, 200),
        "num_unlabeled": (int, 120),
        "dense_objects": (_range_pair, (0, 3)),
        "sparse_objects": (_range_pair, (1, 6)),
        "seed": (int, 0),
    },
    "model": {
        "kind": (str, "tnet"),
        "num_blocks": (int, 8),
        "feature_maps": (int, 64),
        "kernel": (int, 7),
        "dropout_p": (float, 0.0),
        "class_space": (str, "full"),
        "fusion_maps": (_int_list, (128, 64, 64, 64)),
        "seed": (int, 0),
    },
    "train": {
        "strategy": (str, "bgc"),
        "epochs": (int, 6),
        "steps_per_epoch": (int, 25),
        "batch_dense": (int, 6),
        "batch_sparse": (int, 2),
        "lambda": (float, 0.25),
        "optimizer": (str, "scgd"),
        "lr": (float, 0.05),
        "seed": (int, 0),
        "eval_every": (int, 1),
        "restart_every": (int, 20),
    },
    "distill": {
        "method": (str, "tk_smp_wce"),
        "epochs": (int, 6),
        "steps_per_epoch": (int, 25),
        "batch_labeled": (int, 6),
        "batch_unlabeled": (int, 2),
        "lambda_unlabeled": (float, 0.25),
        "dropout_p": (float, 0.3),
        "optimizer": (str, "scgd"),
        "lr": (float, 0.05),
        "seed": (int, 0),
        "eval_every": (int, 1),
    },
    "eval": {
        "batch_size": (int, 8),
    },
}


def default_config() -> dict:
    return {section: {key: copy.copy(default) for key, (_, default) in keys.items()}
            for section, keys in SCHEMA.items()}


def load_config(path=None, overrides=()) -> dict:
    """Read an INI file (optional) and apply ``section.key=value`` overrides."""
    merged = default_config()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path, encoding="utf-8")
        if not read:
            raise ConfigError(f"cannot read config file {path!r}")
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in parser.items(section):
                _apply(merged, path, section, key, value)
    for text in overrides:
        if "=" not in text:
            raise ConfigError(f"override {text!r} is not section.key=value")
        dotted, value = text.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override {text!r} is not section.key=value")
        section, key = dotted.split(".", 1)
        _apply(merged, "<override>", section.strip(), key.strip(), value.strip())
    return merged


def _apply(merged, source, section, key, value):
    if section not in SCHEMA:
        raise ConfigError(f"{source}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{source}: unknown key {key!r} in section [{section}]")
    parser_fn = SCHEMA[section][key][0]
    try:
        merged[section][key] = parser_fn(value)
    except ConfigError:
        raise
    except (TypeError, ValueError):
        raise ConfigError(f"{source}: bad value {value!r} for "
                          f"[{section}] {key}") from None


def write_config(path, config: dict) -> None:
    """Persist the effective configuration as INI."""
    parser = configparser.ConfigParser()
    for section, keys in config.items():
        parser[section] = {}
        for key, value in keys.items():
            if isinstance(value, tuple) and len(value) == 2 \
                    and SCHEMA[section][key][0] is _range_pair:
                text = f"{value[0]}:{value[1]}"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = str(value)
            parser[section][key] = text
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
