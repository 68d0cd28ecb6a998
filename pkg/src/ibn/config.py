"""JSON run configuration with dotted command-line overrides.

Sections and keys (all optional; defaults shown by ``default_config()``)::

    data      source ("synthetic" | "csv"), series, adjacency, coords,
              n, t, seed, alpha, beta, period, noise_std   (synthetic generator)
              h, l, stride, splits
    model     d, embed_dim, dropout, mc_samples, bidirectional, use_uai, graph,
              tie_ggcn_weights, resample_per_gate, deterministic_eval
    train     lr, beta1, beta2, eps, batch_size, max_epochs, patience, clip_norm,
              seed, eval_seed, eval_batch_size, uai_to_ia, ggcn_to_agcn, bi_to_uni
    mask      rate, seed
    ablation  seeds, variants, dataset_name

``IBN_SEED`` in the environment replaces ``train.seed``.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from pathlib import Path

from .recurrent import ModelConfig
from .training import VARIANTS, TrainConfig

SEED_ENV = "IBN_SEED"


class ConfigError(ValueError):
    pass


_DATA = {
    "source": "synthetic",
    "series": None,
    "adjacency": None,
    "coords": None,
    "n": 12,
    "t": 2000,
    "seed": 0,
    "alpha": 0.5,
    "beta": 0.5,
    "period": 24.0,
    "noise_std": 0.1,
    "h": 12,
    "l": 3,
    "stride": 1,
    "splits": [0.7, 0.1, 0.2],
}
_MASK = {"rate": 0.5, "seed": 0}
_ABLATION = {"seeds": [0, 1, 2], "variants": list(VARIANTS), "dataset_name": "synthetic"}
_MODEL_DERIVED = ("n", "h", "l", "c")


def _defaults_of(cls, skip=()):
    return {f.name: f.default for f in dataclasses.fields(cls) if f.name not in skip}


def default_config() -> dict:
    return {
        "data": copy.deepcopy(_DATA),
        "model": _defaults_of(ModelConfig, _MODEL_DERIVED),
        "train": _defaults_of(TrainConfig),
        "mask": dict(_MASK),
        "ablation": copy.deepcopy(_ABLATION),
    }


def merge(base: dict, update: dict, where: str = "") -> dict:
    """Overlay ``update`` on ``base``; keys absent from ``base`` are errors."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{path}' must be an object")
            out[key] = merge(out[key], value, path)
        else:
            out[key] = value
    return out


def _coerce(raw: str, current):
    """Parse a command-line string against the type of the current value."""
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}") from None
    if isinstance(current, list):
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = [v for v in raw.split(",") if v]
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {raw!r}")
        return value
    if current is None and raw.lower() == "null":
        return None
    return raw


def apply_overrides(config: dict, overrides: list[tuple[str, str]]) -> dict:
    """Apply ``("train.lr", "0.001")`` style overrides."""
    out = copy.deepcopy(config)
    for dotted, raw in overrides:
        section, _, key = dotted.partition(".")
        if not key or section not in out or not isinstance(out[section], dict) or key not in out[section]:
            raise ConfigError(f"unknown config key '{dotted}'")
        try:
            out[section][key] = _coerce(raw, out[section][key])
        except ConfigError as exc:
            raise ConfigError(f"{dotted}: {exc}") from None
    return out


def load_config(path=None, overrides: list[tuple[str, str]] = (), env=None) -> dict:
    """Defaults, then the JSON file, then overrides, then ``IBN_SEED``; validated."""
    env = os.environ if env is None else env
    config = default_config()
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        config = merge(config, raw)
    config = apply_overrides(config, list(overrides))
    if env.get(SEED_ENV):
        try:
            config["train"]["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    validate(config)
    return config


def validate(config: dict):
    data = config["data"]
    if data["source"] not in ("synthetic", "csv"):
        raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {data['source']!r}")
    if data["source"] == "csv" and not (data["series"] and data["adjacency"]):
        raise ConfigError("data.source 'csv' needs data.series and data.adjacency")
    for key in ("h", "l", "stride", "n", "t"):
        if not isinstance(data[key], int) or isinstance(data[key], bool) or data[key] < 1:
            raise ConfigError(f"data.{key} must be a positive integer, got {data[key]!r}")
    splits = data["splits"]
    if len(splits) != 3 or any(s <= 0 for s in splits) or abs(sum(splits) - 1.0) > 1e-9:
        raise ConfigError(f"data.splits must be three positive fractions summing to 1, got {splits}")
    if not 0.0 <= config["mask"]["rate"] < 1.0:
        raise ConfigError(f"mask.rate must lie in [0, 1), got {config['mask']['rate']}")
    unknown = [v for v in config["ablation"]["variants"] if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; choose from {list(VARIANTS)}")
    try:
        train_config(config)
        model_config(config, n=max(data["n"], 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def train_config(config: dict) -> TrainConfig:
    return TrainConfig(**config["train"])


def model_config(config: dict, n: int) -> ModelConfig:
    return ModelConfig(n=n, h=config["data"]["h"], l=config["data"]["l"], c=1, **config["model"])
