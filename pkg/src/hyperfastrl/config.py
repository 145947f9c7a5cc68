"""Experiment configuration: env + hypernetwork + trainer, (de)serialised as YAML or JSON."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .env import EnvConfig, ReferenceTarget
from .hypernet import HypernetConfig


@dataclass(frozen=True)
class TrainConfig:
    total_env_steps: int = 200_000
    n_envs: int = 64
    batch_size: int = 1024
    gradient_steps: int = 2
    exploration_fraction: float = 0.05
    actor_delay: int = 2
    tau: float = 0.01
    gamma: float = 0.99
    n_step: int = 3
    exploration_noise: float = 0.05
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    buffer_capacity: int = 200_000
    lr: float = 3e-4
    weight_decay: float = 1e-4
    n_quantiles: int = 25
    drop: int = 5
    normalizer_eps: float = 1e-8
    reward_norm: str = "return"  # "return": std of running discounted return; "reward": std of raw reward
    eval_every_fraction: float = 0.05
    eval_episodes: int = 10
    dtype: str = "float64"
    max_consecutive_nonfinite: int = 100

    def __post_init__(self):
        if self.reward_norm not in ("return", "reward"):
            raise ValueError(f"reward_norm must be 'return' or 'reward', got {self.reward_norm!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        for name in ("total_env_steps", "n_envs", "batch_size", "gradient_steps", "n_step", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.exploration_fraction < 1:
            raise ValueError("exploration_fraction must lie in [0, 1)")

    @property
    def reuse_ratio(self) -> float:
        return reuse_ratio(self.gradient_steps, self.batch_size, self.n_envs)


def reuse_ratio(gradient_steps: int, batch_size: int, n_envs: int) -> float:
    """Gradient samples consumed per environment transition: GS * B / N_env."""
    return gradient_steps * batch_size / n_envs


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    hypernet: HypernetConfig = field(default_factory=HypernetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"env": self.env.to_dict(), "hypernet": self.hypernet.to_dict(), "train": asdict(self.train)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {"env", "hypernet", "train"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        env = _build(EnvConfig, d.get("env", {}))
        hyper = _build(HypernetConfig, d.get("hypernet", {}))
        train = _build(TrainConfig, d.get("train", {}))
        hyper = replace(hyper, obs_dim=env.N, act_dim=env.n_actuators, n_quantiles=train.n_quantiles)
        return cls(env, hyper, train)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> None:
        path = Path(path)
        text = json.dumps(self.to_dict(), indent=2) if path.suffix == ".json" else yaml.safe_dump(self.to_dict(), sort_keys=False)
        path.write_text(text)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        data = json.loads(path.read_text()) if path.suffix == ".json" else yaml.safe_load(path.read_text())
        return cls.from_dict(data)


def _build(klass, values: dict):
    names = {f.name for f in fields(klass)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
    values = dict(values)
    if klass is EnvConfig and isinstance(values.get("reference"), dict):
        ref = dict(values["reference"])
        if "amplitudes" in ref:
            ref["amplitudes"] = tuple(ref["amplitudes"])
        values["reference"] = ReferenceTarget(**ref)
    for k in ("mu_grid", "widths"):
        if k in values:
            values[k] = tuple(values[k])
    return klass(**values)


def desk_config(**train_overrides) -> ExperimentConfig:
    """The scaled-down learning configuration (64 envs, 2e5 steps, 3-point mu grid)."""
    env = EnvConfig(mu_grid=(-0.075, 0.0, 0.075))
    hyper = HypernetConfig(encoder="mlp", widths=(32, 64, 128))
    train = replace(TrainConfig(), **train_overrides)
    return ExperimentConfig(env, hyper, train)
