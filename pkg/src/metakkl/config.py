"""Run configuration: a strict JSON document with a canonical content hash.

Unknown keys are rejected so typos cannot silently fall back to defaults.
The hash covers the fully resolved document (defaults applied), so a config
file, its checkpoint, and its reports can be tied together.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapt import STRATEGY_KINDS, SamplingStrategy
from .data import TaskDistribution
from .sim import NoiseSpec
from .train import MetaConfig, TrainConfig

__all__ = ["RunConfig", "ConfigError", "DEFAULT_CONFIG"]


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "system": {
        "kind": "duffing",
        "lambda": 1.0,
        "x0": [0.5, 0.5],
    },
    "observer": {
        "epsilon": 1e-6,
        "z_norm_bound": None,
    },
    "dataset": {
        "dt": 0.02,
        "t_train": 20.0,
        "t_eval": 50.0,
        "sampling_horizon": 70.0,
        "n_train_tasks": 5,
        "distribution": {
            "kind": "lambda-variation",
            "lambda_range": [1.0, 5.0],
            "x0_domain": [[-1.0, 1.0], [-1.0, 1.0]],
            "fixed_lambda": 1.0,
            "fixed_x0": [0.5, 0.5],
        },
        "noise": None,
        "data_seed": 1009,
        "validation_seed": 2003,
    },
    "training": {
        "epochs": 400,
        "batch_size": 256,
        "lr": 1e-3,
        "adam": [0.9, 0.999, 1e-8],
        "pinn_weight": 1.0,
        "hidden": [50, 50, 50, 50, 50],
    },
    "meta": {
        "epochs": 1500,
        "n_batch_meta": 4,
        "n_adapt": 5,
        "n_adapt_points": 32,
        "n_query_points": 256,
        "alpha_init": 0.01,
        "first_order": False,
        "pretrain": True,
        "pretrain_epochs": 300,
    },
    "adaptation": {
        "strategy": "minimum",
        "n_batch": 32,
        "window_length": 50.0,
        "delay": None,
    },
    "evaluation": {
        "n_validation": 50,
        "n_out_of_range": 20,
        "transient": None,
        "noise": {"var_x": 0.1, "var_y": 0.1, "seed": 97},
        "seeds": [0, 1, 2, 3, 4],
        "grid_resolution": 21,
        "literal_time_mean": True,
    },
}


def _merge_with_defaults(doc: dict, defaults: dict, path: str = "") -> dict:
    """Apply defaults recursively; reject keys not present in the defaults."""
    if not isinstance(doc, dict):
        raise ConfigError(f"expected an object at '{path or '<root>'}'")
    merged = copy.deepcopy(defaults)
    for key, value in doc.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{here}'")
        default_value = defaults[key]
        if isinstance(default_value, dict) and isinstance(value, dict):
            merged[key] = _merge_with_defaults(value, default_value, here)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration document plus its canonical hash."""

    doc: dict
    content_hash: str

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        merged = _merge_with_defaults(doc, DEFAULT_CONFIG)
        cls._validate(merged)
        canonical = json.dumps(merged, sort_keys=True, separators=(",", ":"))
        digest = hashlib.sha256(canonical.encode()).hexdigest()
        return cls(doc=merged, content_hash=digest)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    @staticmethod
    def _validate(doc: dict) -> None:
        if doc["system"]["kind"] != "duffing":
            raise ConfigError(f"unknown system kind '{doc['system']['kind']}'")
        dist = doc["dataset"]["distribution"]
        if dist["kind"] not in ("lambda-variation", "x0-variation"):
            raise ConfigError(f"unknown distribution kind '{dist['kind']}'")
        lo, hi = dist["lambda_range"]
        if dist["kind"] == "lambda-variation" and lo >= hi:
            raise ConfigError("dataset.distribution.lambda_range is empty")
        if doc["adaptation"]["strategy"] not in STRATEGY_KINDS:
            raise ConfigError(f"unknown adaptation strategy '{doc['adaptation']['strategy']}'")
        if doc["training"]["epochs"] < 1 or doc["meta"]["epochs"] < 1:
            raise ConfigError("epochs must be >= 1")
        if doc["dataset"]["dt"] <= 0:
            raise ConfigError("dataset.dt must be > 0")

    # -- typed views ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def distribution(self) -> TaskDistribution:
        d = self.doc["dataset"]["distribution"]
        return TaskDistribution(
            kind=d["kind"],
            lambda_range=tuple(d["lambda_range"]),
            x0_domain=np.asarray(d["x0_domain"], dtype=np.float64),
            fixed_lambda=float(d["fixed_lambda"]),
            fixed_x0=np.asarray(d["fixed_x0"], dtype=np.float64),
        )

    def train_config(self, method: str = "parallel", seed: int | None = None,
                     pinn_weight: float | None = None) -> TrainConfig:
        t = self.doc["training"]
        epochs = int(self.doc["meta"]["epochs"]) if method == "meta" else int(t["epochs"])
        return TrainConfig(
            epochs=epochs,
            batch_size=int(t["batch_size"]),
            lr=float(t["lr"]),
            adam=tuple(float(v) for v in t["adam"]),
            seed=self.seed if seed is None else int(seed),
            method=method,
            pinn_weight=float(t["pinn_weight"] if pinn_weight is None else pinn_weight),
            hidden=tuple(int(h) for h in t["hidden"]),
        )

    def meta_config(self, first_order: bool | None = None,
                    pretrain: bool | None = None) -> MetaConfig:
        m = self.doc["meta"]
        return MetaConfig(
            n_batch_meta=int(m["n_batch_meta"]),
            n_adapt=int(m["n_adapt"]),
            n_adapt_points=int(m["n_adapt_points"]),
            n_query_points=int(m["n_query_points"]),
            alpha_init=float(m["alpha_init"]),
            first_order=bool(m["first_order"] if first_order is None else first_order),
            pretrain=bool(m["pretrain"] if pretrain is None else pretrain),
            pretrain_epochs=int(m["pretrain_epochs"]),
        )

    def dataset_noise(self) -> NoiseSpec | None:
        n = self.doc["dataset"]["noise"]
        if n is None:
            return None
        return NoiseSpec(var_x=float(n["var_x"]), var_y=float(n["var_y"]),
                         seed=int(n["seed"]))

    def evaluation_noise(self) -> NoiseSpec | None:
        n = self.doc["evaluation"]["noise"]
        if n is None:
            return None
        return NoiseSpec(var_x=float(n["var_x"]), var_y=float(n["var_y"]),
                         seed=int(n["seed"]))

    def adaptation_strategy(self, name: str | None = None,
                            default_delay: float = 0.0) -> SamplingStrategy:
        a = self.doc["adaptation"]
        kind = a["strategy"] if name is None else name
        delay = a["delay"]
        if delay is None:
            delay = default_delay if kind.endswith("delayed") else 0.0
        window = float(a["window_length"]) if kind.startswith("window") else None
        return SamplingStrategy(kind=kind, window_length=window, delay=float(delay))
