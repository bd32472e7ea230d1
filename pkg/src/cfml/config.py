"""Experiment configuration: defaults, validation and hashing.

A config file is a JSON object with an ``experiment`` id and any subset of
that experiment's keys.  Missing keys take the defaults below; keys the
experiment does not know are rejected with their dotted path.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

EXPERIMENTS = ("kernel-vs-model", "margin-convergence", "transductive-training", "exposure-sweep")
ARCH_NAMES = ("mcf", "ncf-add", "ncf-concat")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


_RATINGS = {
    "source": "synthetic",
    "path": None,
    "num_users": 200,
    "num_items": 300,
    "rank": 5,
    "density": 0.063,
    "threshold": 4.0,
    "seed": 0,
}

DEFAULTS = {
    "kernel-vs-model": {
        "dataset": {**_RATINGS, "subsample_users": 50, "subsample_items": 50},
        "archs": ["mcf", "ncf-concat"],
        "d": 128,
        "hidden": [64],
        "lr": 0.01,
        "epochs": 3000,
        "loss": "log",
        "init": {"scheme": "scaled", "scale": 1.0},
        "negatives": [1, 2, 4],
        "C": [1.0, 10.0, 100.0],
        "svm_tol": 1e-6,
        "seeds": list(range(10)),
    },
    "margin-convergence": {
        "dataset": {"num_users": 20, "num_items": 20, "rank": 1, "noise": 0.0, "seed": 0},
        "d": 32,
        "lr": 0.1,
        "epochs": 10000,
        "loss": "exp",
        "init": {"scheme": "fixed", "scale": 0.1},
        "checkpoints": [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000],
        "seeds": list(range(10)),
    },
    "transductive-training": {
        "dataset": dict(_RATINGS),
        "archs": ["mcf", "ncf-concat"],
        "d": 32,
        "hidden": [16],
        "lr": 0.1,
        "epochs": 50,
        "loss": "log",
        "init": {"scheme": "fixed", "scale": 0.1},
        "negatives": 4,
        "beta": 0.25,
        "seeds": list(range(10)),
    },
    "exposure-sweep": {
        "dataset": {**_RATINGS, "num_users": 100, "num_items": 100, "density": 0.1},
        "sources": ["mcf", "ncf-concat"],
        "archs": ["mcf", "ncf-concat"],
        "pi_grid": [0.0, 0.25, 0.5, 0.75, 1.0],
        "mu": 3.0,
        "rho": 2.0,
        "fit": {"d": 32, "hidden": [8], "lr": 1e-3, "relevance_epochs": 100, "exposure_epochs": 30, "batch_size": 64},
        "d": 32,
        "hidden": [16],
        "lr": 0.1,
        "epochs": 20,
        "loss": "log",
        "init": {"scheme": "fixed", "scale": 0.1},
        "negatives": 4,
        "seeds": list(range(10)),
    },
}

# settings that keep every experiment to seconds
SMOKE = {
    "kernel-vs-model": {"epochs": 50, "negatives": [2], "dataset": {"subsample_users": 20, "subsample_items": 20}},
    "margin-convergence": {"epochs": 200, "checkpoints": [1, 10, 100, 200]},
    "transductive-training": {"epochs": 3, "dataset": {"num_users": 40, "num_items": 60}},
    "exposure-sweep": {"epochs": 2, "pi_grid": [0.0, 1.0], "archs": ["mcf"]},
}


def _merge(base, override, path, strict=True):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            if strict:
                raise ConfigError(where, "unknown key")
            out[key] = val
            continue
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(where, "expected an object")
            out[key] = _merge(base[key], val, where, strict)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _num(cfg, key, path, lo=None, hi=None, integer=False, lo_open=False):
    val = cfg[key]
    where = f"{path}.{key}" if path else key
    if isinstance(val, bool) or not isinstance(val, (int, float)) or (integer and not isinstance(val, int)):
        raise ConfigError(where, f"expected {'an integer' if integer else 'a number'}, got {val!r}")
    if lo is not None and (val < lo or (lo_open and val == lo)):
        raise ConfigError(where, f"value {val} out of range (must be {'>' if lo_open else '>='} {lo})")
    if hi is not None and val > hi:
        raise ConfigError(where, f"value {val} out of range (must be <= {hi})")


def _int_list(cfg, key, path, lo=None, nonempty=True):
    val = cfg[key]
    where = f"{path}.{key}" if path else key
    if not isinstance(val, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in val):
        raise ConfigError(where, "expected a list of integers")
    if nonempty and not val:
        raise ConfigError(where, "must not be empty")
    if lo is not None and any(v < lo for v in val):
        raise ConfigError(where, f"entries must be >= {lo}")


def _arch_list(cfg, key):
    val = cfg[key]
    if not isinstance(val, list) or not val:
        raise ConfigError(key, "expected a non-empty list of architecture names")
    for k, name in enumerate(val):
        if name not in ARCH_NAMES:
            raise ConfigError(f"{key}[{k}]", f"unknown architecture {name!r}; expected one of {ARCH_NAMES}")


def _check_common(cfg):
    exp = cfg["experiment"]
    _int_list(cfg, "seeds", "", lo=0)
    if len(set(cfg["seeds"])) != len(cfg["seeds"]):
        raise ConfigError("seeds", "duplicate seed")
    for key in ("d", "epochs"):
        if key in cfg:
            _num(cfg, key, "", lo=1, integer=True)
    if "lr" in cfg:
        _num(cfg, "lr", "", lo=0, lo_open=True)
    if "hidden" in cfg:
        _int_list(cfg, "hidden", "", lo=1, nonempty=False)
    if "loss" in cfg and cfg["loss"] not in ("exp", "log"):
        raise ConfigError("loss", f"expected 'exp' or 'log', got {cfg['loss']!r}")
    if "init" in cfg:
        if cfg["init"]["scheme"] not in ("scaled", "fixed"):
            raise ConfigError("init.scheme", f"expected 'scaled' or 'fixed', got {cfg['init']['scheme']!r}")
        _num(cfg["init"], "scale", "init", lo=0, lo_open=True)
    ds = cfg["dataset"]
    for key in ("num_users", "num_items", "rank", "subsample_users", "subsample_items"):
        if key in ds:
            _num(ds, key, "dataset", lo=1, integer=True)
    if "seed" in ds:
        _num(ds, "seed", "dataset", lo=0, integer=True)
    if "density" in ds:
        _num(ds, "density", "dataset", lo=0, hi=1, lo_open=True)
    if "noise" in ds:
        _num(ds, "noise", "dataset", lo=0, hi=1)
    if "threshold" in ds:
        _num(ds, "threshold", "dataset", lo=1, hi=5)
    if "source" in ds:
        if ds["source"] not in ("synthetic", "file"):
            raise ConfigError("dataset.source", f"expected 'synthetic' or 'file', got {ds['source']!r}")
        if ds["source"] == "file" and not ds.get("path"):
            raise ConfigError("dataset.path", "required when dataset.source is 'file'")
    if exp == "margin-convergence" and ds["rank"] > min(ds["num_users"], ds["num_items"]):
        raise ConfigError("dataset.rank", "rank exceeds the matrix size")


def _check_specific(cfg):
    exp = cfg["experiment"]
    if exp == "kernel-vs-model":
        _arch_list(cfg, "archs")
        _int_list(cfg, "negatives", "", lo=0)
        grid = cfg["C"] if isinstance(cfg["C"], list) else [cfg["C"]]
        if not grid:
            raise ConfigError("C", "must not be empty")
        for k, v in enumerate(grid):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0:
                raise ConfigError(f"C[{k}]" if isinstance(cfg["C"], list) else "C", f"expected a positive number, got {v!r}")
        _num(cfg, "svm_tol", "", lo=0, lo_open=True)
    elif exp == "margin-convergence":
        _int_list(cfg, "checkpoints", "", lo=0)
    elif exp == "transductive-training":
        _arch_list(cfg, "archs")
        _num(cfg, "negatives", "", lo=0, integer=True)
        _num(cfg, "beta", "", lo=0, hi=1, lo_open=True)
        if cfg["beta"] >= 1:
            raise ConfigError("beta", "value out of range (must be < 1)")
    elif exp == "exposure-sweep":
        _arch_list(cfg, "archs")
        _arch_list(cfg, "sources")
        grid = cfg["pi_grid"]
        if not isinstance(grid, list) or not grid:
            raise ConfigError("pi_grid", "expected a non-empty list")
        for k, v in enumerate(grid):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise ConfigError(f"pi_grid[{k}]", f"value {v!r} out of range [0, 1]")
        _num(cfg, "mu", "")
        _num(cfg, "rho", "", lo=0, lo_open=True)
        _num(cfg, "negatives", "", lo=1, integer=True)
        fit = cfg["fit"]
        _num(fit, "d", "fit", lo=1, integer=True)
        _num(fit, "relevance_epochs", "fit", lo=0, integer=True)
        _num(fit, "exposure_epochs", "fit", lo=0, integer=True)
        _num(fit, "batch_size", "fit", lo=1, integer=True)
        _num(fit, "lr", "fit", lo=0, lo_open=True)
        _int_list(fit, "hidden", "fit", lo=1, nonempty=False)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    params: dict

    def __getitem__(self, key):
        return self.params[key]

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, **copy.deepcopy(self.params)}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def resolve_config(raw: dict, smoke: bool = False, seeds=None) -> ExperimentConfig:
    """Apply defaults, optional smoke settings and a seed override, then validate."""
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    exp = raw.get("experiment")
    if exp is None:
        raise ConfigError("experiment", "missing experiment id")
    if exp not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {exp!r}; expected one of {EXPERIMENTS}")
    body = {k: v for k, v in raw.items() if k != "experiment"}
    cfg = _merge(DEFAULTS[exp], body, "")
    if smoke:
        smoke_over = copy.deepcopy(SMOKE[exp])
        # explicit values in the file win over smoke settings
        for key in list(smoke_over):
            if key in body and not isinstance(smoke_over[key], dict):
                del smoke_over[key]
        cfg = _merge(cfg, smoke_over, "")
        if "seeds" not in body:
            cfg["seeds"] = [0]
    if seeds is not None:
        cfg["seeds"] = list(seeds)
    cfg["experiment"] = exp
    _check_common(cfg)
    _check_specific(cfg)
    del cfg["experiment"]
    return ExperimentConfig(exp, cfg)


def validate_config(path, smoke: bool = False, seeds=None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from None
    return resolve_config(raw, smoke=smoke, seeds=seeds)
