"""Nested JSON experiment configuration with dotted-path overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

DEFAULTS: dict = {
    "physics": {
        "f_c": 3.0e8,
        "K": 4,
        "delta_f": 8.0e5,
        "n_t": 8,
        "n_r": 8,
        "grid_n": 8,
        "grid_side": 1.0,
        "solver_tol": 1e-8,
        "solver_max_iter": 500,
    },
    "dataset": {
        "count": 500,
        "M": 64,
        "split": [0.8, 0.1, 0.1],
        "r_min": 5.0,
        "r_max": 30.0,
        "max_angle_deg": 60.0,
        "eps_range": [1.0, 5.0],
        "sigma_range": [0.0, 0.05],
    },
    "pilots": {"kind": "unitary-comb", "I": 32, "power": 1.0, "per_subcarrier_snr": False},
    "ae": {
        "d_pos": 48,
        "channels": 64,
        "down_blocks": 3,
        "skip": True,
        "geometric": True,
        "pca_init": False,
        "epochs": 300,
        "lr": 1e-3,
        "lr_decay": 0.99,
        "batch_size": 64,
        "noise_snr_db": None,
        "time_budget_s": None,
    },
    "fm": {"hidden": [512, 512], "ctx_dim": 32, "steps": 3000, "lr": 1e-3, "batch_size": 64, "coupling": "paired"},
    "dsb": {
        "N": 20,
        "gamma_min": 0.001,
        "gamma_max": 0.05,
        "epochs": 4,
        "steps_per_half": 500,
        "lr": 1e-4,
        "batch_size": 64,
        "final_noise": False,
        "perturb_sense_start": False,
        "val_targets": 16,
    },
    "eval": {
        "snr_db": [0, 10, 20, 30],
        "seeds": [0, 1, 2, 3, 4],
        "locations": [[5.0, 0.0, 0.0], [15.0, 0.0, 0.0], [25.0, 0.0, 0.0]],
        "radii": [5.0, 15.0, 25.0],
        "angles_deg": [-45.0, 0.0, 45.0],
        "max_targets": 20,
        "location_snr_db": 30,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, upd: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in upd.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(out[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def set_dotted(cfg: dict, dotted: str, raw: str) -> None:
    """Override a leaf; ``raw`` is parsed as JSON when possible, otherwise kept as a string."""
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"unknown config section {dotted!r}")
        node = node[key]
    if keys[-1] not in node or isinstance(node[keys[-1]], dict):
        raise ConfigError(f"unknown config leaf {dotted!r}")
    try:
        node[keys[-1]] = json.loads(raw)
    except json.JSONDecodeError:
        node[keys[-1]] = raw


def validate(cfg: dict) -> dict:
    p, d, pil = cfg["physics"], cfg["dataset"], cfg["pilots"]
    for name in ("K", "n_t", "n_r", "grid_n"):
        if int(p[name]) <= 0:
            raise ConfigError(f"physics.{name} must be positive")
    if int(d["M"]) <= 0 or int(d["count"]) <= 0:
        raise ConfigError("dataset.M and dataset.count must be positive")
    split = d["split"]
    if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError("dataset.split must be three non-negative fractions summing to 1")
    if int(pil["I"]) < int(p["n_t"]):
        raise ConfigError("pilots.I must be at least physics.n_t")
    if cfg["ae"]["d_pos"] % 6:
        raise ConfigError("ae.d_pos must be divisible by 6")
    if int(cfg["dsb"]["N"]) < 2:
        raise ConfigError("dsb.N must be at least 2")
    if len(cfg["eval"]["seeds"]) == 0:
        raise ConfigError("eval.seeds must be non-empty")
    return cfg


def load_config(path: str | Path | None = None, overrides: dict | None = None, dotted=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            cfg = _merge(cfg, json.load(fh))
    if overrides:
        cfg = _merge(cfg, overrides)
    for item in dotted:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        set_dotted(cfg, key.strip(), raw.strip())
    return validate(cfg)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict, seed: int, section: str | None = None, n: int = 12) -> str:
    """Content hash of (config, seed); ``section`` restricts the hash to the sub-config a stage depends on."""
    body = cfg if section is None else {k: cfg[k] for k in section.split("+")}
    return hashlib.sha256(canonical_json({"cfg": body, "seed": int(seed)}).encode()).hexdigest()[:n]
