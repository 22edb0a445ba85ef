"""Run configuration: one TOML file, environment overrides, canonical hash.

Every key has a typed default (desk scale).  A file may set any subset of
keys; unknown sections or keys are rejected.  ``TEXTWEIGHTS_<SECTION>__<KEY>``
environment variables override file values and are parsed as TOML values
(bare words fall back to strings).
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import tomli

ENV_PREFIX = "TEXTWEIGHTS_"

DEFAULTS = {
    "universe": {
        "classes": 40,
        "feature_dim": 32,
        "embed_dim": 32,
        "noise_scale": 0.1,
        "alignment": 0.5,
        "seed": 0,
        "embeddings_file": "",
    },
    "dataset": {
        "n_tasks": 220,
        "k_min": 4,
        "k_max": 12,
        "seen_fraction": 0.91,
        "block_size": 16,
        "block_count": 0,
    },
    "heads": {
        "hidden_dim": 4,
        "epochs_base": 1,
        "epochs_subtask": 32,
        "learning_rate": 1e-3,
        "batch_size": 32,
        "samples_per_class": 64,
        "base_samples_per_class": 512,
        "activation": "gelu",
    },
    "diffusion": {
        "steps": 200,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "lambda_sym": 0.1,
        "lambda_adv": 0.01,
        "learning_rate": 2e-3,
        "disc_learning_rate": 1e-2,
        "batch_size": 8,
        "epochs": 30,
        "warmup_epochs": 5,
        "grad_clip": 0.1,
        "width": 128,
        "depth": 2,
        "heads": 4,
        "ffn_mult": 4,
        "final_norm": False,
        "disc_hidden": [64, 64, 32],
        "noise_draws": 4,
    },
    "eval": {
        "test_samples_per_class": 16,
        "tau": 0.0,
        "tau_test": 0.0,
        "sample_seed": 0,
        "enhance_tasks": 5,
        "enhance_fraction": 0.5,
        "fusion_pairs": 5,
        "init_methods": ["xavier-uniform", "xavier-normal", "kaiming-uniform",
                         "kaiming-normal", "uniform", "normal", "t2w"],
        "init_epochs": 50,
        "init_learning_rate": 3e-4,
        "theory_draws": 50,
        "theory_batch": 8,
        "gradcheck_cases": 100,
        "gradcheck_coords": 2,
    },
    "landscape": {
        "resolution": 25,
        "alpha_range": [-4.0, 4.0],
        "beta_range": [-4.0, 4.0],
        "split": "test",
        "format": "csv",
    },
    "paths": {
        "workdir": "runs/desk",
    },
}


class ConfigError(ValueError):
    pass


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{where} must be a non-empty list")
        return [_coerce(section, key, v, default[0]) for v in value]
    raise ConfigError(f"{where} has an unsupported type")


def _merge(cfg: dict, data: dict, origin: str):
    for section, values in data.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: [{section}] must be a table")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            cfg[section][key] = _coerce(section, key, value, DEFAULTS[section][key])


def _env_value(raw: str):
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def env_overrides(environ) -> dict:
    out = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if "__" not in rest:
            raise ConfigError(f"environment override {name} needs SECTION__KEY")
        section, key = rest.split("__", 1)
        out.setdefault(section.lower(), {})[key.lower()] = _env_value(raw)
    return out


def _validate(cfg: dict):
    u, ds, h, df, ev, ls = (cfg[k] for k in ("universe", "dataset", "heads", "diffusion", "eval",
                                              "landscape"))
    positive = [("universe", "classes"), ("universe", "feature_dim"), ("universe", "embed_dim"),
                ("dataset", "n_tasks"), ("dataset", "k_min"), ("dataset", "block_size"),
                ("heads", "hidden_dim"), ("heads", "batch_size"), ("heads", "samples_per_class"),
                ("heads", "base_samples_per_class"), ("diffusion", "steps"),
                ("diffusion", "batch_size"), ("diffusion", "width"), ("diffusion", "depth"),
                ("diffusion", "heads"), ("diffusion", "ffn_mult"), ("diffusion", "noise_draws"),
                ("eval", "test_samples_per_class"), ("landscape", "resolution")]
    for section, key in positive:
        if cfg[section][key] < 1:
            raise ConfigError(f"{section}.{key} must be positive")
    if not ds["k_min"] <= ds["k_max"] <= u["classes"]:
        raise ConfigError("need dataset.k_min <= dataset.k_max <= universe.classes")
    if not 0.0 < ds["seen_fraction"] < 1.0:
        raise ConfigError("dataset.seen_fraction must lie in (0, 1)")
    if ds["block_count"] < 0:
        raise ConfigError("dataset.block_count must be >= 0 (0 derives it from block_size)")
    if not 0.0 < df["beta_start"] <= df["beta_end"] < 1.0:
        raise ConfigError("need 0 < diffusion.beta_start <= diffusion.beta_end < 1")
    if df["width"] % df["heads"]:
        raise ConfigError("diffusion.width must be divisible by diffusion.heads")
    if len(df["disc_hidden"]) != 3:
        raise ConfigError("diffusion.disc_hidden lists exactly three widths")
    for key in ("alpha_range", "beta_range"):
        if len(ls[key]) != 2 or ls[key][0] > ls[key][1]:
            raise ConfigError(f"landscape.{key} must be [low, high]")
    if ls["split"] not in ("train", "test"):
        raise ConfigError("landscape.split must be 'train' or 'test'")
    if ls["format"] not in ("csv", "json"):
        raise ConfigError("landscape.format must be 'csv' or 'json'")
    if not 0.0 < ev["enhance_fraction"] <= 1.0:
        raise ConfigError("eval.enhance_fraction must lie in (0, 1]")
    if h["activation"] not in ("gelu", "none"):
        raise ConfigError("heads.activation must be 'gelu' or 'none'")
    if u["alignment"] > 0 and u["feature_dim"] != u["embed_dim"]:
        raise ConfigError("universe.alignment > 0 needs embed_dim == feature_dim")


def load_config(path=None, environ=None) -> dict:
    """Defaults, then the TOML file (if given), then environment overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = tomli.loads(p.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        _merge(cfg, data, str(p))
    _merge(cfg, env_overrides(os.environ if environ is None else environ), "environment")
    _validate(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of every setting that can change a result; output locations are left out."""
    canon = json.dumps({k: v for k, v in cfg.items() if k != "paths"}, sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
