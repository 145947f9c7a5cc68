"""Running (Welford) statistics for observation and reward normalisation."""

from __future__ import annotations

import numpy as np


class Welford:
    """Streaming mean / population variance, merged batch-wise (Chan et al.)."""

    def __init__(self, shape=()):
        self.count = 0
        self.mean = np.zeros(shape, dtype=np.float64)
        self.m2 = np.zeros(shape, dtype=np.float64)

    def update(self, batch) -> None:
        batch = np.asarray(batch, dtype=np.float64).reshape((-1,) + self.mean.shape)
        n = batch.shape[0]
        if n == 0:
            return
        b_mean = batch.mean(axis=0)
        b_m2 = ((batch - b_mean) ** 2).sum(axis=0)
        total = self.count + n
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + b_m2 + delta**2 * (self.count * n / total)
        self.count = total

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count else np.ones_like(self.m2)

    def state_dict(self, prefix: str) -> dict:
        return {f"{prefix}.count": np.array(self.count), f"{prefix}.mean": self.mean, f"{prefix}.m2": self.m2}

    def load_state_dict(self, prefix: str, d: dict) -> None:
        self.count = int(d[f"{prefix}.count"])
        self.mean = np.array(d[f"{prefix}.mean"], dtype=np.float64)
        self.m2 = np.array(d[f"{prefix}.m2"], dtype=np.float64)


class ObsNormalizer:
    """z-score per coordinate; ``frozen`` stops statistics updates (evaluation)."""

    def __init__(self, dim: int, eps: float = 1e-8):
        self.stats = Welford((dim,))
        self.eps = eps
        self.frozen = False

    def update(self, obs) -> None:
        if not self.frozen:
            self.stats.update(obs)

    def __call__(self, obs) -> np.ndarray:
        return (np.asarray(obs) - self.stats.mean) / np.sqrt(self.stats.var + self.eps)

    def state_dict(self, prefix="obs_norm"):
        return self.stats.state_dict(prefix)

    def load_state_dict(self, d, prefix="obs_norm"):
        self.stats.load_state_dict(prefix, d)


class RewardNormalizer:
    """Divide rewards by a running standard deviation, never subtracting a mean.

    ``mode="reward"`` tracks the variance of raw rewards; ``mode="return"``
    tracks the variance of each environment's running discounted return
    ``G <- gamma * G + r`` (reset at episode ends), which keeps the scale of
    the critic's targets near unity.
    """

    def __init__(self, n_envs: int, gamma: float = 0.99, eps: float = 1e-8, mode: str = "return"):
        if mode not in ("reward", "return"):
            raise ValueError(f"unknown mode {mode!r}")
        self.stats = Welford(())
        self.gamma = gamma
        self.eps = eps
        self.mode = mode
        self.returns = np.zeros(n_envs)
        self.frozen = False

    def update(self, rewards, dones=None) -> None:
        if self.frozen:
            return
        rewards = np.asarray(rewards, dtype=np.float64)
        if self.mode == "reward":
            self.stats.update(rewards)
            return
        self.returns = self.gamma * self.returns + rewards
        self.stats.update(self.returns)
        if dones is not None:
            self.returns = np.where(dones, 0.0, self.returns)

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.stats.var + self.eps))

    def __call__(self, rewards) -> np.ndarray:
        return np.asarray(rewards) / self.scale

    def state_dict(self, prefix="reward_norm"):
        d = self.stats.state_dict(prefix)
        d[f"{prefix}.returns"] = self.returns
        return d

    def load_state_dict(self, d, prefix="reward_norm"):
        self.stats.load_state_dict(prefix, d)
        self.returns = np.array(d[f"{prefix}.returns"], dtype=np.float64)
