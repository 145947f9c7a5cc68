"""n-step transition assembly over parallel environments and a uniform ring buffer."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    n_step_return: float
    next_obs: np.ndarray
    discount: float
    done: bool
    rewards: np.ndarray  # the per-step (scaled) rewards summed into n_step_return
    raw_return: float = 0.0


def n_step_return(rewards, gamma: float) -> float:
    return float(sum(gamma**i * r for i, r in enumerate(rewards)))


class NStepAssembler:
    """Per-environment queues that turn single steps into n-step transitions.

    A transition starting at step t is emitted once n further rewards are known
    (discount gamma^n) or when the episode ends first: on termination the
    discount is 0, on a time-limit truncation it is gamma^len and the target
    bootstraps from the final observation.  Steps flagged unstable discard
    every pending transition of that environment.
    """

    def __init__(self, n_envs: int, n: int = 3, gamma: float = 0.99):
        self.n, self.gamma = n, gamma
        self.queues = [deque() for _ in range(n_envs)]

    def _emit(self, q, next_obs, done: bool, terminated: bool) -> Transition:
        obs, action = q[0][0], q[0][1]
        rewards = np.array([s[2] for s in q])
        raw = np.array([s[3] for s in q])
        discount = 0.0 if terminated else self.gamma ** len(q)
        return Transition(obs, action, n_step_return(rewards, self.gamma), next_obs, discount, done, rewards, n_step_return(raw, self.gamma))

    def add(self, obs, actions, rewards, next_obs, terminated, truncated, unstable=None, raw_rewards=None) -> list[Transition]:
        """Push one vectorised step; ``next_obs`` must be the pre-reset observation."""
        out = []
        raw_rewards = rewards if raw_rewards is None else raw_rewards
        for i, q in enumerate(self.queues):
            if unstable is not None and unstable[i]:
                q.clear()
                continue
            q.append((obs[i], actions[i], float(rewards[i]), float(raw_rewards[i])))
            if terminated[i] or truncated[i]:
                while q:
                    out.append(self._emit(q, next_obs[i], True, bool(terminated[i])))
                    q.popleft()
            elif len(q) == self.n:
                out.append(self._emit(q, next_obs[i], False, False))
                q.popleft()
        return out


class ReplayBuffer:
    """Fixed-capacity ring of n-step transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, n: int = 3):
        self.capacity = capacity
        self.n = n
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.returns = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.discounts = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.step_rewards = np.zeros((capacity, n))
        self.lengths = np.zeros(capacity, dtype=np.int64)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        i = self.ptr
        self.obs[i] = t.obs
        self.actions[i] = t.action
        self.returns[i] = t.n_step_return
        self.next_obs[i] = t.next_obs
        self.discounts[i] = t.discount
        self.dones[i] = t.done
        self.step_rewards[i] = 0.0
        self.step_rewards[i, : len(t.rewards)] = t.rewards
        self.lengths[i] = len(t.rewards)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, transitions) -> None:
        for t in transitions:
            self.push(t)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return {
            "obs": self.obs[idx],
            "actions": self.actions[idx],
            "returns": self.returns[idx],
            "next_obs": self.next_obs[idx],
            "discounts": self.discounts[idx],
        }
