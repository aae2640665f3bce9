"""Run configuration: defaults, presets, YAML I/O, dotted overrides and hashing."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class ModelConfig:
    d_model: int = 256
    n_state: int = 16
    expand: int = 2
    conv_width: int = 4
    use_conv: bool = True
    discretization: str = "simplified"  # or "zoh"
    latent_groups: int = 32
    latent_classes: int = 32
    unimix: float = 0.01
    cnn_depth: int = 16
    head_hidden: int = 256
    gmamba_layers: int = 1
    lmamba_layers: int = 1
    gmamba_len: int = 16
    lmamba_window: int = 4
    reward_bins: int = 255
    bin_low: float = -20.0
    bin_high: float = 20.0
    # ablation switches
    disable_gmamba: bool = False
    dbl_mamba: bool = False
    plain_local: bool = False


@dataclass
class WorldModelConfig:
    batch_size: int = 32
    batch_length: int = 64
    lr: float = 1e-4
    grad_clip: float = 1000.0
    beta_dyn: float = 0.5
    beta_rep: float = 0.1
    beta_var: float = 0.1
    free_bits: float = 1.0


@dataclass
class AgentConfig:
    imagination_batch: int = 1024
    context_length: int = 16
    horizon_init: int = 16
    horizon_increase: int = 8
    horizon_period: int = 25000
    horizon_max: int = 32
    lr: float = 3e-5
    grad_clip: float = 100.0
    gamma: float = 0.985
    lam: float = 0.95
    entropy_coef: float = 3e-4
    hidden: int = 256
    return_norm_decay: float = 0.99
    eval_greedy: bool = False


@dataclass
class EnvConfig:
    name: str = "minipong"
    frame_size: int = 32
    action_repeat: int = 4
    random_start: bool = True
    context_length: int = 16


@dataclass
class TrainConfig:
    seed: int = 0
    warmup_steps: int = 1024
    wm_every: int = 1
    agent_every: int = 1
    replay_capacity: int = 100_000
    strict: bool = False


@dataclass
class RunConfig:
    """Bookkeeping that does not change the trajectory of a run; excluded from the hash."""

    total_steps: int = 100_000
    log_every: int = 100
    checkpoint_every: int = 5000
    eval_episodes: int = 20


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("run")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> "Config":
        m, wm, ag, env = self.model, self.world_model, self.agent, self.env
        if env.frame_size not in (32, 64):
            raise ValueError("env.frame_size must be 32 or 64")
        if m.discretization not in ("simplified", "zoh"):
            raise ValueError("model.discretization must be 'simplified' or 'zoh'")
        for name in ("gmamba_layers", "lmamba_layers"):
            if getattr(m, name) not in (1, 2):
                raise ValueError(f"model.{name} must be 1 or 2")
        if m.disable_gmamba and m.dbl_mamba:
            raise ValueError("disable_gmamba and dbl_mamba are mutually exclusive")
        if wm.batch_length < max(m.gmamba_len, m.lmamba_window):
            raise ValueError("world_model.batch_length must be >= max(gmamba_len, lmamba_window)")
        if not (0 <= ag.gamma <= 1 and 0 <= ag.lam <= 1):
            raise ValueError("agent.gamma and agent.lam must lie in [0, 1]")
        if ag.horizon_init > ag.horizon_max:
            raise ValueError("agent.horizon_init exceeds agent.horizon_max")
        if self.train.warmup_steps < max(wm.batch_length, ag.context_length):
            raise ValueError("train.warmup_steps must cover one training window and one imagination context")
        if self.train.wm_every < 1 or self.train.agent_every < 1:
            raise ValueError("update intervals must be >= 1")
        if self.train.replay_capacity < wm.batch_length:
            raise ValueError("train.replay_capacity smaller than one training window")
        return self


def _from_dict(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ValueError(f"config section {path or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys at {path or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        val = data[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _from_dict(sub, val, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(val, f.type, f"{path}{name}")
    return cls(**kwargs)


def _coerce(val, typ, path):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "bool":
        if not isinstance(val, bool):
            raise ValueError(f"{path}: expected a boolean, got {val!r}")
        return val
    if typ == "int":
        if isinstance(val, bool) or not isinstance(val, int):
            if isinstance(val, float) and val.is_integer():
                return int(val)
            raise ValueError(f"{path}: expected an integer, got {val!r}")
        return val
    if typ == "float":
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ValueError(f"{path}: expected a number, got {val!r}")
        return float(val)
    if typ == "str":
        return str(val)
    return val


def config_from_dict(data: dict) -> Config:
    return _from_dict(Config, data).validate()


def load_config(path: str | Path) -> Config:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data)


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ValueError(f"unknown config section in override {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(d)


# ------------------------------------------------------------------ presets

ABLATIONS: dict[str, dict[str, Any]] = {
    "full": {},
    "wo_g": {"model.disable_gmamba": True},
    "wo_gl": {"model.disable_gmamba": True, "model.plain_local": True},
    "wo_var": {"world_model.beta_var": 0.0},
    "dbl_mamba": {"model.dbl_mamba": True},
    "g1_l1": {"model.gmamba_layers": 1, "model.lmamba_layers": 1},
    "g1_l2": {"model.gmamba_layers": 1, "model.lmamba_layers": 2},
    "g2_l1": {"model.gmamba_layers": 2, "model.lmamba_layers": 1},
    "g2_l2": {"model.gmamba_layers": 2, "model.lmamba_layers": 2},
}

SMOKE: dict[str, Any] = {
    "model.d_model": 32,
    "model.n_state": 8,
    "model.expand": 1,
    "model.latent_groups": 8,
    "model.latent_classes": 8,
    "model.cnn_depth": 4,
    "model.head_hidden": 32,
    "model.reward_bins": 65,
    "world_model.batch_size": 4,
    "world_model.batch_length": 20,
    "world_model.lr": 1e-3,
    "agent.imagination_batch": 16,
    "agent.context_length": 8,
    "agent.horizon_init": 8,
    "agent.horizon_max": 16,
    "agent.horizon_period": 1000,
    "agent.hidden": 32,
    "agent.lr": 3e-4,
    "env.context_length": 8,
    "train.warmup_steps": 256,
    "train.replay_capacity": 5000,
    "run.total_steps": 2000,
    "run.log_every": 100,
    "run.checkpoint_every": 500,
    "run.eval_episodes": 2,
}

PRESETS: dict[str, dict[str, Any]] = {"default": {}, "smoke": SMOKE}


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node[p]
    if parts[-1] not in node:
        raise ValueError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def make_config(preset: str = "default", ablation: str = "full", **dotted) -> Config:
    """Build a config from a base preset, an ablation cell and dotted ``a__b`` overrides."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
    d = Config().to_dict()
    for k, v in {**PRESETS[preset], **ABLATIONS[ablation]}.items():
        _set_dotted(d, k, copy.deepcopy(v))
    for k, v in dotted.items():
        _set_dotted(d, k.replace("__", "."), v)
    return config_from_dict(d)
