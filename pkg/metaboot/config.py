"""Experiment configuration.

Precedence, lowest first: dataclass defaults < preset < config file <
``--seed``/``--out`` flags < the ``METABOOT_SEED`` environment variable.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from .base import ConfigError

_LOGGER = logging.getLogger("config")

EXPERIMENTS = ("verify", "twocolors-ac", "twocolors-q", "multitask", "gradcheck")
MODES = ("fixed", "mg", "bmg")
MATCHING_KINDS = ("kl_target_first", "kl_online_first", "kl_symmetric", "l2_params", "value_l2", "policy_plus_value")
Q_MATCHING = ("policy", "value")
MATCHING_ROLLOUTS = ("inner", "latest")
MG_OBJECTIVES = ("mean", "final")
FINAL_RULES = ("objective", "meta")

META_LR_SWEEP = (3e-6, 1e-5, 3e-5, 1e-4, 3e-4)
ENTROPY_SWEEP = (0.0, 0.01, 0.03, 0.1, 0.3)
EPSILON_SWEEP = (0.01, 0.03, 0.1, 0.2, 0.4)

SEED_ENV = "METABOOT_SEED"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "twocolors-ac"
    seed: int = 0
    seeds: Tuple[int, ...] = ()
    total_env_steps: int = 2_000_000
    mode: str = "bmg"
    K: int = 1
    L: int = 7
    matching: str = "kl_target_first"
    lambda_v: float = 0.25
    eps_meta: float = 0.0
    fixed_epsilon: float = 0.1
    mg_objective: str = "mean"
    target_final_rule: str = "objective"
    matching_rollout: str = "inner"
    inner_lr: float = 0.1
    final_step_lr: Optional[float] = None
    meta_lr: float = 1e-4
    adam_eps: float = 1e-4
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    gamma: float = 0.99
    n_step: int = 16
    rollout_len: int = 16
    hidden_layers: int = 2
    hidden_width: int = 256
    meta_hidden_width: int = 32
    stats_window: int = 10
    q_lambda: float = 0.7
    q_window: int = 16
    q_lr: float = 3e-5
    grad_ema: float = 0.9
    meta_grad_ema: float = 0.0
    q_meta_every: int = 16
    q_matching: str = "policy"
    flip_period: int = 100_000
    multitask_ways: int = 5
    multitask_shots: int = 5
    multitask_queries: int = 15
    multitask_dim: int = 8
    multitask_hidden: int = 32
    multitask_meta_batch: int = 8
    multitask_meta_steps: int = 300
    multitask_inner_lr: float = 0.4
    multitask_eval_tasks: int = 20
    multitask_eval_every: int = 50
    multitask_temperature: float = 1.0
    theory_instances: int = 50
    theory_dominance_instances: int = 1000
    theory_max_dim: int = 20
    theory_max_K: int = 5
    theory_beta_grid: Tuple[float, ...] = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    theory_alpha: float = 1e-5
    theory_tolerance: float = 0.01
    theory_bmg_tolerance: float = 0.05
    gradcheck_h: float = 1e-5
    gradcheck_tolerance: float = 1e-3
    out_dir: str = "runs"
    meta_zero_init: bool = False
    trajectory_dump: bool = False
    save_params: bool = False

    @property
    def run_seeds(self) -> Tuple[int, ...]:
        return self.seeds or (self.seed,)

    @property
    def resolved_final_step_lr(self) -> float:
        return self.inner_lr if self.final_step_lr is None else self.final_step_lr

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return from_dict({**self.to_dict(), **changes})

    def validate(self) -> "ExperimentConfig":
        _check_types(self)
        _choice(self, "experiment", EXPERIMENTS)
        _choice(self, "mode", MODES)
        _choice(self, "matching", MATCHING_KINDS)
        _choice(self, "q_matching", Q_MATCHING)
        _choice(self, "matching_rollout", MATCHING_ROLLOUTS)
        _choice(self, "mg_objective", MG_OBJECTIVES)
        _choice(self, "target_final_rule", FINAL_RULES)
        for name in ("K", "L", "n_step", "rollout_len", "hidden_width", "meta_hidden_width", "stats_window",
                     "q_window", "q_meta_every", "flip_period", "total_env_steps", "multitask_ways",
                     "multitask_shots", "multitask_queries", "multitask_dim", "multitask_hidden",
                     "multitask_meta_batch", "multitask_eval_tasks", "multitask_eval_every",
                     "theory_instances", "theory_dominance_instances", "theory_max_K"):
            _at_least(self, name, 1)
        for name in ("hidden_layers", "multitask_meta_steps", "seed"):
            _at_least(self, name, 0)
        if self.theory_max_dim < 2:
            raise ConfigError("theory_max_dim", "must be >= 2")
        for name in ("inner_lr", "q_lr", "multitask_inner_lr", "theory_alpha", "gradcheck_h",
                     "gradcheck_tolerance", "theory_tolerance", "theory_bmg_tolerance", "adam_eps",
                     "multitask_temperature"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be > 0, got {getattr(self, name)}")
        for name in ("meta_lr", "lambda_v", "eps_meta"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.final_step_lr is not None and self.final_step_lr <= 0:
            raise ConfigError("final_step_lr", "must be > 0 when set")
        for name in ("gamma", "adam_b1", "adam_b2", "grad_ema", "meta_grad_ema"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, f"must be in [0, 1), got {getattr(self, name)}")
        for name in ("fixed_epsilon", "q_lambda"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, f"must be in [0, 1], got {getattr(self, name)}")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds", "seeds must be >= 0")
        if not self.theory_beta_grid or any(b <= 0 for b in self.theory_beta_grid):
            raise ConfigError("theory_beta_grid", "needs at least one positive beta")
        if list(self.theory_beta_grid) != sorted(self.theory_beta_grid, reverse=True):
            raise ConfigError("theory_beta_grid", "must be decreasing")
        if self.experiment == "multitask" and self.matching in ("value_l2", "policy_plus_value"):
            raise ConfigError("matching", "multitask matching supports KL kinds and l2_params only")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_OPTIONAL_FLOATS = ("final_step_lr",)


def _check_types(cfg: ExperimentConfig) -> None:
    for name, f in _FIELDS.items():
        value = getattr(cfg, name)
        default = f.default
        if name in _OPTIONAL_FLOATS:
            if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigError(name, f"expected a number or null, got {value!r}")
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        elif isinstance(default, tuple):
            elem = float if name == "theory_beta_grid" else int
            ok = isinstance(value, tuple) and all(
                isinstance(v, (int, float) if elem is float else int) and not isinstance(v, bool) for v in value)
        else:
            ok = True
        if not ok:
            raise ConfigError(name, f"wrong type {type(value).__name__} (value {value!r})")


def _choice(cfg: ExperimentConfig, name: str, allowed: Tuple[str, ...]) -> None:
    if getattr(cfg, name) not in allowed:
        raise ConfigError(name, f"must be one of {', '.join(allowed)}; got {getattr(cfg, name)!r}")


def _at_least(cfg: ExperimentConfig, name: str, lo: int) -> None:
    if getattr(cfg, name) < lo:
        raise ConfigError(name, f"must be >= {lo}, got {getattr(cfg, name)}")


# Named presets, like codec profiles: partial field maps over the defaults.
PRESETS: Dict[str, Dict[str, Any]] = {
    "full-ac": {
        "experiment": "twocolors-ac", "total_env_steps": 10_000_000, "mode": "bmg", "K": 1, "L": 7,
        "inner_lr": 0.1, "gamma": 0.99, "rollout_len": 16, "n_step": 16, "hidden_layers": 2,
        "hidden_width": 256, "meta_hidden_width": 32, "stats_window": 10, "meta_lr": 1e-4,
        "adam_eps": 1e-4, "adam_b1": 0.9, "adam_b2": 0.999, "eps_meta": 0.0,
    },
    "full-q": {
        "experiment": "twocolors-q", "total_env_steps": 10_000_000, "mode": "bmg", "L": 4,
        "q_lr": 3e-5, "grad_ema": 0.9, "q_lambda": 0.7, "q_window": 16, "gamma": 0.99,
        "hidden_layers": 2, "hidden_width": 256, "meta_hidden_width": 32, "stats_window": 50,
        "meta_lr": 1e-4, "meta_grad_ema": 0.9, "q_meta_every": 16, "q_matching": "policy",
    },
    "desk-ac": {
        "experiment": "twocolors-ac", "total_env_steps": 2_000_000, "mode": "bmg", "K": 1, "L": 7,
        "stats_window": 10, "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
    },
    "desk-q": {
        "experiment": "twocolors-q", "total_env_steps": 2_000_000, "mode": "bmg", "L": 4,
        "q_lr": 3e-5, "grad_ema": 0.9, "q_lambda": 0.7, "stats_window": 50, "meta_grad_ema": 0.9,
        "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
    },
    "multitask-default": {
        "experiment": "multitask", "mode": "bmg", "K": 1, "L": 5, "matching": "kl_target_first",
        "meta_lr": 1e-3, "seeds": [0, 1, 2],
    },
    "verify-default": {"experiment": "verify"},
    "gradcheck-default": {"experiment": "gradcheck"},
}

PRESET_NAMES = list(PRESETS.keys())

# Named sweep grids, applied on top of a preset or config template.
SWEEPS: Dict[str, Dict[str, Any]] = {
    "meta-lr": {"meta_lr": list(META_LR_SWEEP)},
    "entropy": {"mode": ["fixed"], "fixed_epsilon": list(ENTROPY_SWEEP)},
    "epsilon": {"mode": ["fixed"], "fixed_epsilon": list(EPSILON_SWEEP)},
}

SWEEP_NAMES = list(SWEEPS.keys())


def sweep_grid(name: Optional[str], extra: Optional[Mapping[str, Any]] = None) -> Dict[str, list]:
    """A copy of the named grid with ``extra`` axes merged over it."""
    grid: Dict[str, list] = {}
    if name is not None:
        if name not in SWEEPS:
            raise ConfigError("sweep", f"unknown sweep {name!r}; choose from {', '.join(SWEEP_NAMES)}")
        grid.update({k: list(v) for k, v in SWEEPS[name].items()})
    grid.update({k: list(v) for k, v in (extra or {}).items()})
    return grid


def from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    kwargs: Dict[str, Any] = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return ExperimentConfig(**kwargs).validate()


def load_config(path: Optional[Union[str, Path]] = None, preset: Optional[str] = None) -> ExperimentConfig:
    """Merge a preset and a flat JSON file (which may name its own preset)."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path}: invalid JSON ({e})") from None
        except OSError as e:
            raise ConfigError("config", f"{path}: {e.strerror or e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", f"{path}: expected a JSON object")
    preset = data.pop("preset", None) or preset
    merged: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {', '.join(PRESET_NAMES)}")
        merged.update(PRESETS[preset])
    merged.update(data)
    return from_dict(merged)


def resolve(cfg: ExperimentConfig, seed: Optional[int] = None, out_dir: Optional[str] = None,
            env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Apply command-line overrides, then the seed environment variable."""
    env = os.environ if env is None else env
    changes: Dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = seed
        changes["seeds"] = []
    if out_dir is not None:
        changes["out_dir"] = out_dir
    raw = env.get(SEED_ENV)
    if raw:
        try:
            changes["seed"] = int(raw)
        except ValueError:
            raise ConfigError("seed", f"{SEED_ENV}={raw!r} is not an integer") from None
        changes["seeds"] = []
        _LOGGER.info("Seed overridden by %s=%s", SEED_ENV, raw)
    return cfg.replace(**changes) if changes else cfg
