"""FastTD3-style off-policy training of hypernetwork actor/critics with TQC targets."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autodiff import OptimizerState, adamw_step
from .checkpoint import CheckpointError, load_archive, save_archive
from .config import ExperimentConfig
from .env import KSEnsemble
from .hypernet import HyperActorCritic, scale_mu
from .normalizers import ObsNormalizer, RewardNormalizer
from .replay import NStepAssembler, ReplayBuffer
from .tqc import quantile_huber_loss, tqc_targets, truncation_mean

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step",
    "train_reward_rolling",
    "eval_mean",
    "eval_min",
    "eval_max",
    "critic_loss",
    "actor_obj",
    "lr",
    "wall_clock_s",
]


class TrainingAborted(RuntimeError):
    pass


class Agent:
    """Online and target hypernetworks, their optimisers and the normalisers."""

    def __init__(self, cfg: ExperimentConfig, seed: int = 0):
        self.cfg = cfg
        self.dtype = getattr(torch, cfg.train.dtype)
        self.obs_dim = cfg.env.N
        torch.manual_seed(seed)
        self.online = HyperActorCritic(cfg.hypernet).to(self.dtype)
        self.target = copy.deepcopy(self.online)
        for p in self.target.parameters():
            p.requires_grad_(False)
        t = cfg.train
        self.actor_opt = OptimizerState(
            [p for p in self.online.actor.parameters() if p.requires_grad], t.lr, weight_decay=t.weight_decay
        )
        self.critic_opt = OptimizerState(
            [p for p in self.online.critics.parameters() if p.requires_grad], t.lr, weight_decay=t.weight_decay
        )
        self.obs_norm = ObsNormalizer(cfg.env.N + 1, t.normalizer_eps)
        self.reward_norm = RewardNormalizer(t.n_envs, t.gamma, t.normalizer_eps, t.reward_norm)
        self.grad_steps = 0

    # -- helpers
    def split_obs(self, obs_raw: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalised field part and scaled mu (mu itself is never z-scored)."""
        y = self.obs_norm(obs_raw)[:, : self.obs_dim]
        mu = obs_raw[:, self.obs_dim]
        return torch.as_tensor(y, dtype=self.dtype), torch.as_tensor(scale_mu(mu), dtype=self.dtype)

    @torch.no_grad()
    def policy(self, obs_raw: np.ndarray) -> np.ndarray:
        """Deterministic actor output; acting never advances the power-iteration estimates."""
        y, mu_t = self.split_obs(obs_raw)
        mode = self.online.actor.training
        self.online.actor.eval()
        try:
            return self.online.act(y, mu_t).numpy().astype(np.float64)
        finally:
            self.online.actor.train(mode)

    def set_schedule(self, critic_steps: int, actor_steps: int) -> None:
        self.critic_opt.total_steps = critic_steps
        self.actor_opt.total_steps = actor_steps

    # -- updates
    def critic_loss(self, batch: dict, rng: np.random.Generator, return_targets: bool = False):
        t = self.cfg.train
        y, mu_t = self.split_obs(batch["obs"])
        y2, mu_t2 = self.split_obs(batch["next_obs"])
        actions = torch.as_tensor(batch["actions"], dtype=self.dtype)
        noise = np.clip(rng.normal(0.0, t.target_noise, batch["actions"].shape), -t.target_noise_clip, t.target_noise_clip)
        with torch.no_grad():
            a2 = (self.target.act(y2, mu_t2) + torch.as_tensor(noise, dtype=self.dtype)).clamp(-1.0, 1.0)
            next_atoms = self.target.quantiles(y2, a2, mu_t2)
            targets = tqc_targets(
                next_atoms,
                torch.as_tensor(batch["returns"], dtype=self.dtype),
                torch.as_tensor(batch["discounts"], dtype=self.dtype),
                t.drop,
            )
        pred = self.online.quantiles(y, actions, mu_t)
        loss = quantile_huber_loss(pred, targets)
        return (loss, targets) if return_targets else loss

    def critic_update(self, batch: dict, rng: np.random.Generator) -> tuple[float, float]:
        try:
            loss, targets = self.critic_loss(batch, rng, return_targets=True)
        except FloatingPointError:  # non-finite target atoms
            loss = torch.tensor(float("nan"))
        params = self.critic_opt.params
        if not torch.isfinite(loss):
            self.critic_opt.skipped += 1
            return float("nan"), float("nan")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        adamw_step(self.critic_opt, grads)
        return float(loss.detach()), float(truncation_mean(targets).mean())

    def actor_objective(self, batch: dict) -> torch.Tensor:
        y, mu_t = self.split_obs(batch["obs"])
        a = self.online.act(y, mu_t)
        q1 = self.online.quantiles(y, a, mu_t, critics=[0])
        return q1.mean(dim=(1, 2)).mean()

    def actor_update(self, batch: dict) -> float:
        obj = self.actor_objective(batch)
        if not torch.isfinite(obj):
            self.actor_opt.skipped += 1
            return float("nan")
        grads = torch.autograd.grad(-obj, self.actor_opt.params, allow_unused=True)
        adamw_step(self.actor_opt, grads)
        return float(obj.detach())

    @torch.no_grad()
    def polyak_update(self, tau: float | None = None) -> None:
        polyak_update(self.online, self.target, self.cfg.train.tau if tau is None else tau)

    def gradient_step(self, buffer: ReplayBuffer, rng: np.random.Generator) -> dict:
        t = self.cfg.train
        batch = buffer.sample(t.batch_size, rng)
        self.grad_steps += 1
        closs, cons = self.critic_update(batch, rng)
        out = {"critic_loss": closs, "conservative_value": cons}
        if self.grad_steps % t.actor_delay == 0:
            out["actor_obj"] = self.actor_update(batch)
            self.polyak_update()
        return out

    # -- persistence
    def state_tensors(self) -> dict:
        d = {}
        for k, v in self.online.state_dict().items():
            d[f"online.{k}"] = v
        for k, v in self.target.state_dict().items():
            d[f"target.{k}"] = v
        d.update(self.actor_opt.state_dict("opt.actor"))
        d.update(self.critic_opt.state_dict("opt.critic"))
        d.update(self.obs_norm.state_dict())
        d.update(self.reward_norm.state_dict())
        return d

    def save(self, path, step: int, extra: dict | None = None) -> Path:
        manifest = {
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "env_hash": self.cfg.env.hash(),
            "step": step,
            "grad_steps": self.grad_steps,
            "actor_opt_total": self.actor_opt.total_steps,
            "critic_opt_total": self.critic_opt.total_steps,
            "normalizers": {
                "obs_count": int(self.obs_norm.stats.count),
                "reward_count": int(self.reward_norm.stats.count),
                "reward_scale": self.reward_norm.scale,
            },
        }
        manifest.update(extra or {})
        return save_archive(path, self.state_tensors(), manifest)

    @classmethod
    def load(cls, path) -> tuple["Agent", dict]:
        arrays, manifest = load_archive(path)
        cfg = ExperimentConfig.from_dict(manifest["config"])
        if cfg.hash() != manifest["config_hash"]:
            raise CheckpointError(f"{path}: config hash mismatch ({cfg.hash()} != {manifest['config_hash']})")
        agent = cls(cfg)
        for prefix, module in (("online.", agent.online), ("target.", agent.target)):
            sd = {k[len(prefix) :]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix)}
            module.load_state_dict(sd)
        agent.actor_opt.load_state_dict("opt.actor", arrays)
        agent.critic_opt.load_state_dict("opt.critic", arrays)
        agent.actor_opt.total_steps = manifest["actor_opt_total"]
        agent.critic_opt.total_steps = manifest["critic_opt_total"]
        agent.obs_norm.load_state_dict(arrays)
        agent.reward_norm.load_state_dict(arrays)
        agent.grad_steps = manifest["grad_steps"]
        return agent, manifest


def polyak_update(online: torch.nn.Module, target: torch.nn.Module, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online over every parameter."""
    with torch.no_grad():
        for p_t, p in zip(target.parameters(), online.parameters()):
            if p_t.shape != p.shape:
                raise ValueError(f"shape mismatch {tuple(p_t.shape)} vs {tuple(p.shape)}")
            p_t.lerp_(p, tau)


def random_actions(rng: np.random.Generator, n: int, act_dim: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, (n, act_dim))


@dataclass
class Collector:
    """Steps the training ensemble and routes transitions into the buffer."""

    agent: Agent
    envs: KSEnsemble
    buffer: ReplayBuffer
    rng: np.random.Generator
    assembler: NStepAssembler = None
    obs: np.ndarray = None
    episode_returns: np.ndarray = None
    finished: list = field(default_factory=list)
    policy_calls: int = 0
    dropped_unstable: int = 0

    def __post_init__(self):
        t = self.agent.cfg.train
        self.assembler = NStepAssembler(self.envs.n_envs, t.n_step, t.gamma)
        self.obs = self.envs.reset()
        self.episode_returns = np.zeros(self.envs.n_envs)

    def collect_step(self, explore: bool) -> list:
        t = self.agent.cfg.train
        act_dim = self.envs.cfg.n_actuators
        self.agent.obs_norm.update(self.obs)
        if explore:
            actions = random_actions(self.rng, self.envs.n_envs, act_dim)
        else:
            self.policy_calls += 1
            actions = self.agent.policy(self.obs)
            actions = np.clip(actions + self.rng.normal(0.0, t.exploration_noise, actions.shape), -1.0, 1.0)
        next_obs, r, done, info = self.envs.step(actions)
        unstable = info["instability"]
        r_safe = np.where(unstable, 0.0, r)
        self.agent.reward_norm.update(r_safe, done)
        scaled = self.agent.reward_norm(r_safe)
        transitions = self.assembler.add(
            self.obs, actions, scaled, info["final_obs"], info["terminated"], info["truncated"], unstable, raw_rewards=r_safe
        )
        self.dropped_unstable += int(unstable.sum())
        self.buffer.extend(transitions)
        self.episode_returns += r_safe
        for i in np.flatnonzero(done):
            if not unstable[i]:
                self.finished.append(float(self.episode_returns[i]))
            self.episode_returns[i] = 0.0
        self.obs = next_obs
        return transitions

    def rolling_return(self, window: int) -> float:
        if not self.finished:
            return float("nan")
        return float(np.mean(self.finished[-window:]))


def run_episodes(cfg: ExperimentConfig, policy, mus, seed: int, case=None) -> np.ndarray:
    """Raw episodic returns of ``policy`` (obs -> actions, or None for random) on one ensemble.

    Slot i runs at ``mus[i]``.  Returns nan for slots that became unstable.
    """
    from dataclasses import replace

    env_cfg = cfg.env if case is None else replace(cfg.env, reference=replace(cfg.env.reference, case=case))
    envs = KSEnsemble(env_cfg, len(mus), seed=seed, mus=mus)
    obs = envs.reset()
    rng = np.random.default_rng(seed)
    total = np.zeros(len(mus))
    alive = np.ones(len(mus), dtype=bool)
    for _ in range(env_cfg.max_steps):
        actions = random_actions(rng, len(mus), env_cfg.n_actuators) if policy is None else policy(obs)
        obs, r, done, info = envs.step(actions, auto_reset=False)
        alive &= ~info["instability"]
        total += np.where(alive, r, 0.0)
        if np.all(done):
            break
    total[~alive] = np.nan
    return total


def balanced_mus(grid, n: int) -> list[float]:
    return [grid[i % len(grid)] for i in range(n)]


def train(cfg: ExperimentConfig, seed: int, out_dir, progress: bool = False) -> dict:
    """Run the full loop; writes ``metrics.csv``, ``run.json`` and ``checkpoint.npz`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    agent = Agent(cfg, seed)
    envs = KSEnsemble(cfg.env, t.n_envs, seed=seed)
    buffer = ReplayBuffer(t.buffer_capacity, cfg.env.N + 1, cfg.env.n_actuators, t.n_step)
    collector = Collector(agent, envs, buffer, rng)

    n_iters = max(1, t.total_env_steps // t.n_envs)
    explore_iters = int(round(t.exploration_fraction * n_iters))
    critic_steps = t.gradient_steps * (n_iters - explore_iters)
    agent.set_schedule(critic_steps, critic_steps // t.actor_delay)
    eval_every = max(1, int(round(t.eval_every_fraction * n_iters)))
    eval_mus = balanced_mus(cfg.env.mu_grid, t.eval_episodes)

    manifest = {
        "seed": seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "env_hash": cfg.env.hash(),
        "reuse_ratio": t.reuse_ratio,
        "iterations": n_iters,
        "exploration_iterations": explore_iters,
        "critic_steps": critic_steps,
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2))
    fh = open(out / "metrics.csv", "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(METRIC_COLUMNS)

    last = {"critic_loss": float("nan"), "actor_obj": float("nan")}
    consecutive_bad = 0
    eval_history = []
    try:
        for it in range(1, n_iters + 1):
            explore = it <= explore_iters
            collector.collect_step(explore)
            if not explore and len(buffer) > 0:
                for _ in range(t.gradient_steps):
                    res = agent.gradient_step(buffer, rng)
                    if np.isfinite(res["critic_loss"]):
                        consecutive_bad = 0
                        last["critic_loss"] = res["critic_loss"]
                    else:
                        consecutive_bad += 1
                        log.warning("non-finite critic loss at gradient step %d", agent.grad_steps)
                        if consecutive_bad > t.max_consecutive_nonfinite:
                            raise TrainingAborted(f"{consecutive_bad} consecutive non-finite critic losses")
                    if "actor_obj" in res and np.isfinite(res["actor_obj"]):
                        last["actor_obj"] = res["actor_obj"]
            if it % eval_every == 0 or it == n_iters:
                agent.obs_norm.frozen = True
                returns = run_episodes(cfg, agent.policy, eval_mus, seed=seed + 1_000_003)
                agent.obs_norm.frozen = False
                eval_history.append(returns)
                row = [
                    it * t.n_envs,
                    collector.rolling_return(t.n_envs),
                    np.nanmean(returns),
                    np.nanmin(returns),
                    np.nanmax(returns),
                    last["critic_loss"],
                    last["actor_obj"],
                    agent.critic_opt.lr,
                    round(time.perf_counter() - start, 3),
                ]
                writer.writerow([_fmt(v) for v in row])
                fh.flush()
                if progress:
                    print(" ".join(f"{k}={_fmt(v)}" for k, v in zip(METRIC_COLUMNS, row)), flush=True)
    finally:
        fh.close()

    ckpt = agent.save(out / "checkpoint.npz", step=n_iters * t.n_envs, extra={"seed": seed})
    manifest.update(
        {
            "wall_clock_s": time.perf_counter() - start,
            "final_eval_mean": float(np.nanmean(eval_history[-1])),
            "final_train_rolling": collector.rolling_return(t.n_envs),
            "dropped_unstable_steps": collector.dropped_unstable,
            "checkpoint": ckpt.name,
        }
    )
    (out / "run.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
