"""Run configuration: schema, file loading, overrides, and run hashing.

One YAML file drives every command. The schema below is the single source
of truth: every key has a default, unknown keys are rejected by name, and
the fully resolved mapping (defaults + file + overrides) is hashed to name
the run directory, so identical configurations land in identical places.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .losses import LossConfig
from .net import NetConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration: unknown key, bad type, or bad value."""


_LOSS_PRESETS = ("softmax", "sphereface", "cosface")

# Defaults double as the type oracle for validation.
_SCHEMA: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs",
    "dataset": {
        "identities": 40,
        "per_identity": 25,
        "image_size": 32,
        "noise_level": 0.02,
    },
    "pair": {
        "sheet_rows": 4,
    },
    "train": {
        "batch_size": 32,
        "lr_init": 0.1,
        "lr_decay": 0.9,
        "decay_interval_epochs": 5,
        "lr_floor": 1e-6,
        "epochs": 25,
        "pool_size": 2000,
    },
    "loss": {
        "preset": None,
        "m1": 1,
        "m2": 0.0,
        "scale": 16.0,
        "geo_margin": 9.4,
        "appearance_weight": 1.3,
        "geometry_weight": 0.75,
        "monotonic_angle": False,
    },
    "net": {
        "trunk": ["conv:8:2", "res:8", "conv:16:2", "res:16"],
        "d": 16,
        "d_prime": 32,
        "n_classes": "auto",
    },
    "eval": {
        "neighbors_k": 6,
        "sheet_probes": 6,
        "probe_folds": 5,
        "verification_folds": 10,
        "attribute_epochs": 40,
    },
    "sweep": {
        "lambda_a": [0.0, 1.3, 2.0],
        "lambda_g": [0.0, 0.75, 2.0],
        "seeds": [0, 1, 2],
    },
    "gradcheck": {
        "step": 1e-5,
        "tolerance": 1e-4,
        "precision": "f64",
    },
}


def _check_scalar(path: str, default: Any, value: Any) -> Any:
    """Coerce and validate one leaf against its schema default."""
    if path == "loss.preset":
        if value is None:
            return None
        if value not in _LOSS_PRESETS:
            raise ConfigError(f"{path} must be one of {_LOSS_PRESETS} or null, got {value!r}")
        return value
    if path == "loss.scale":
        if value == "embedding-norm":
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool) and value > 0:
            return float(value)
        raise ConfigError(f"{path} must be a positive number or 'embedding-norm', got {value!r}")
    if path == "net.n_classes":
        if value == "auto":
            return value
        if isinstance(value, int) and not isinstance(value, bool) and value >= 2:
            return value
        raise ConfigError(f"{path} must be 'auto' or an integer >= 2, got {value!r}")
    if path in ("net.trunk",):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{path} must be a list of layer strings")
        return list(value)
    if path in ("sweep.lambda_a", "sweep.lambda_g"):
        if (
            not isinstance(value, list)
            or not value
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        ):
            raise ConfigError(f"{path} must be a non-empty list of numbers")
        return [float(v) for v in value]
    if path == "sweep.seeds":
        if (
            not isinstance(value, list)
            or not value
            or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in value)
        ):
            raise ConfigError(f"{path} must be a non-empty list of non-negative integers")
        return [int(v) for v in value]
    if path == "gradcheck.precision":
        if value not in ("f64", "f32"):
            raise ConfigError(f"{path} must be 'f64' or 'f32', got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    raise ConfigError(f"unsupported config key {path}")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration plus the set of user-provided key paths."""

    seed: int
    out_dir: str
    dataset: dict
    pair: dict
    train: dict
    loss: dict
    net: dict
    eval: dict
    sweep: dict
    gradcheck: dict
    provided: frozenset

    def resolved(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dataset": dict(self.dataset),
            "pair": dict(self.pair),
            "train": dict(self.train),
            "loss": dict(self.loss),
            "net": dict(self.net),
            "eval": dict(self.eval),
            "sweep": dict(self.sweep),
            "gradcheck": dict(self.gradcheck),
        }

    def run_hash(self) -> str:
        """12-hex digest of everything that affects results (out_dir excluded)."""
        body = self.resolved()
        del body["out_dir"]
        blob = json.dumps(body, sort_keys=True).encode("ascii")
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.out_dir) / f"run-{self.run_hash()}"

    def write_resolved(self, run_dir) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "config.yaml", "w", encoding="ascii") as fh:
            yaml.safe_dump(self.resolved(), fh, sort_keys=True, default_flow_style=False)
        with open(run_dir / "config.hash", "w", encoding="ascii") as fh:
            fh.write(self.run_hash() + "\n")

    # -- typed section views -------------------------------------------------

    def loss_config(self) -> LossConfig:
        preset = self.loss["preset"]
        if preset is None:
            base = LossConfig()
        else:
            base = getattr(LossConfig, preset)()
        overrides = {
            key: self.loss[key]
            for key in ("m1", "m2", "scale", "geo_margin", "appearance_weight",
                        "geometry_weight", "monotonic_angle")
            if preset is None or f"loss.{key}" in self.provided
        }
        try:
            return replace(base, **overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def net_config(self, n_classes: int | None = None) -> NetConfig:
        configured = self.net["n_classes"]
        if configured == "auto":
            if n_classes is None:
                raise ConfigError("net.n_classes is 'auto' but no class count is known yet")
            classes = n_classes
        else:
            classes = configured
            if n_classes is not None and classes != n_classes:
                raise ConfigError(
                    f"net.n_classes={classes} but the training split has {n_classes} identities"
                )
        size = self.dataset["image_size"]
        try:
            return NetConfig(
                input_size=(size, size, 1),
                trunk=tuple(self.net["trunk"]),
                d=self.net["d"],
                d_prime=self.net["d_prime"],
                n_classes=classes,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, n_classes: int | None = None) -> TrainConfig:
        try:
            return TrainConfig(
                batch_size=self.train["batch_size"],
                lr_init=self.train["lr_init"],
                lr_decay=self.train["lr_decay"],
                decay_interval_epochs=self.train["decay_interval_epochs"],
                lr_floor=self.train["lr_floor"],
                epochs=self.train["epochs"],
                seed=self.seed,
                pool_size=self.train["pool_size"],
                loss=self.loss_config(),
                net=self.net_config(n_classes),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _merge(user: Mapping, provided: set[str]) -> dict:
    """Walk the user mapping against the schema; reject unknown keys."""
    resolved = {
        "seed": _SCHEMA["seed"],
        "out_dir": _SCHEMA["out_dir"],
    }
    for section, defaults in _SCHEMA.items():
        if isinstance(defaults, dict):
            resolved[section] = dict(defaults)
    for key, value in user.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        if isinstance(_SCHEMA[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{key} must be a mapping of settings")
            for sub, subvalue in value.items():
                if sub not in _SCHEMA[key]:
                    raise ConfigError(f"unknown config key: {key}.{sub}")
                path = f"{key}.{sub}"
                resolved[key][sub] = _check_scalar(path, _SCHEMA[key][sub], subvalue)
                provided.add(path)
        else:
            resolved[key] = _check_scalar(key, _SCHEMA[key], value)
            provided.add(key)
    return resolved


def _apply_override(resolved: dict, provided: set[str], spec: str) -> None:
    if "=" not in spec:
        raise ConfigError(f"override must look like section.key=value, got {spec!r}")
    path, raw = spec.split("=", 1)
    path = path.strip()
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    parts = path.split(".")
    if len(parts) == 1:
        key = parts[0]
        if key not in _SCHEMA or isinstance(_SCHEMA[key], dict):
            raise ConfigError(f"unknown config key: {key}")
        resolved[key] = _check_scalar(key, _SCHEMA[key], value)
        provided.add(key)
    elif len(parts) == 2:
        section, key = parts
        if section not in _SCHEMA or not isinstance(_SCHEMA[section], dict):
            raise ConfigError(f"unknown config key: {section}")
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key: {path}")
        resolved[section][key] = _check_scalar(path, _SCHEMA[section][key], value)
        provided.add(path)
    else:
        raise ConfigError(f"override path too deep: {path!r}")


def load_run_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    """Read a YAML config file, apply --set overrides, return the resolved config."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            user = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if user is None:
        user = {}
    if not isinstance(user, Mapping):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    provided: set[str] = set()
    resolved = _merge(user, provided)
    for spec in overrides:
        _apply_override(resolved, provided, spec)
    return RunConfig(
        seed=resolved["seed"],
        out_dir=resolved["out_dir"],
        dataset=resolved["dataset"],
        pair=resolved["pair"],
        train=resolved["train"],
        loss=resolved["loss"],
        net=resolved["net"],
        eval=resolved["eval"],
        sweep=resolved["sweep"],
        gradcheck=resolved["gradcheck"],
        provided=frozenset(provided),
    )


def default_run_config(**section_overrides) -> RunConfig:
    """Programmatic RunConfig with schema defaults, for tests and tooling."""
    provided: set[str] = set()
    resolved = _merge({}, provided)
    for section, table in section_overrides.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config key: {section}")
        if isinstance(_SCHEMA[section], dict):
            for key, value in table.items():
                _apply_override(resolved, provided, f"{section}.{key}={json.dumps(value)}")
        else:
            _apply_override(resolved, provided, f"{section}={json.dumps(table)}")
    return RunConfig(
        seed=resolved["seed"],
        out_dir=resolved["out_dir"],
        dataset=resolved["dataset"],
        pair=resolved["pair"],
        train=resolved["train"],
        loss=resolved["loss"],
        net=resolved["net"],
        eval=resolved["eval"],
        sweep=resolved["sweep"],
        gradcheck=resolved["gradcheck"],
        provided=frozenset(provided),
    )
