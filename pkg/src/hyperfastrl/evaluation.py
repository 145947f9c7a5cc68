"""Post-training protocol: per-mu return tables, heatmap rollouts and multi-run sweeps."""

from __future__ import annotations

import csv
import glob
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ExperimentConfig
from .env import CASES, KSEnsemble, write_trajectory
from .trainer import Agent, run_episodes

SEEN_MUS = (-0.225, -0.15, -0.075, 0.0, 0.075, 0.15, 0.225)
INTERPOLATION_MU = 0.1125
EXTRAPOLATION_MU = -0.25
HEATMAP_STEPS = 1000
CONTROL_ONSET = 500


@dataclass(frozen=True)
class TestProtocol:
    seen: tuple[float, ...] = SEEN_MUS
    interpolation: tuple[float, ...] = (INTERPOLATION_MU,)
    extrapolation: tuple[float, ...] = (EXTRAPOLATION_MU,)
    episodes: int = 10
    case: str = "zero"
    seed: int = 12345
    expected_env_hash: str | None = None

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}")
        for k in ("seen", "interpolation", "extrapolation"):
            object.__setattr__(self, k, tuple(float(v) for v in getattr(self, k)))

    __test__ = False  # not a pytest class

    @property
    def mus(self) -> list[float]:
        return list(self.seen) + list(self.interpolation) + list(self.extrapolation)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def load(cls, path) -> "TestProtocol":
        return cls(**json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def load_policy(checkpoint):
    """Agent with frozen normalisers plus its manifest."""
    agent, manifest = Agent.load(checkpoint)
    agent.obs_norm.frozen = True
    agent.reward_norm.frozen = True
    return agent, manifest


def case_env_config(cfg: ExperimentConfig, case: str):
    if case == cfg.env.reference.case:
        return cfg.env
    return replace(cfg.env, reference=replace(cfg.env.reference, case=case))


def summarize(table: dict[float, dict]) -> dict:
    means = np.array([row["mean"] for row in table.values()])
    return {
        "test_min": float(np.nanmin(means)),
        "test_max": float(np.nanmax(means)),
        "test_std": float(np.nanstd(means)),
    }


def evaluate_policy(cfg: ExperimentConfig, policy, protocol: TestProtocol) -> dict:
    """Per-mu raw-return statistics; ``policy=None`` is the uniform random baseline."""
    rows = {}
    for k, mu in enumerate(protocol.mus):
        returns = run_episodes(cfg, policy, [mu] * protocol.episodes, seed=protocol.seed + 7919 * k, case=protocol.case)
        rows[mu] = {
            "mean": float(np.nanmean(returns)),
            "min": float(np.nanmin(returns)),
            "max": float(np.nanmax(returns)),
            "returns": [float(r) for r in returns],
            "unstable": int(np.isnan(returns).sum()),
        }
    return {"per_mu": rows, "summary": summarize(rows)}


def evaluate(checkpoint, protocol: TestProtocol, out_path=None, baseline: bool = False) -> dict:
    """Evaluate a checkpoint (and optionally the random baseline) under ``protocol``."""
    agent, manifest = load_policy(checkpoint)
    cfg = agent.cfg
    env_cfg = case_env_config(cfg, protocol.case)
    if protocol.expected_env_hash is not None and protocol.expected_env_hash != env_cfg.hash():
        raise CheckpointError(
            f"protocol expects environment {protocol.expected_env_hash}, checkpoint builds {env_cfg.hash()}"
        )
    report = {
        "checkpoint": str(checkpoint),
        "config_hash": manifest["config_hash"],
        "env_hash": env_cfg.hash(),
        "train_env_hash": manifest["env_hash"],
        "seed": protocol.seed,
        "protocol": protocol.to_dict(),
        "policy": evaluate_policy(cfg, agent.policy, protocol),
    }
    if baseline:
        report["random_baseline"] = evaluate_policy(cfg, None, protocol)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(_jsonable(report), indent=2))
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


# ---------------------------------------------------------------- heatmaps
def heatmap_seed(mu: float, case: str) -> int:
    """Fixed seed per (mu, case) so figures are reproducible."""
    return int(round(abs(mu) * 1e4)) * 10 + (1 if mu < 0 else 0) * 5 + CASES.index(case) + 2024


def heatmap_rollout(cfg: ExperimentConfig, policy, mu: float, case: str, seed: int | None = None,
                    steps: int = HEATMAP_STEPS, onset: int = CONTROL_ONSET) -> tuple[np.ndarray, bool]:
    """Field before each control step; zero actuation before ``onset``, ``policy`` after.

    Returns ``(fields, stable)``; on instability the rows recorded so far are returned.
    """
    env_cfg = case_env_config(cfg, case)
    seed = heatmap_seed(mu, case) if seed is None else seed
    envs = KSEnsemble(env_cfg, 1, seed=seed, mus=[mu])
    envs.reset()
    rows = []
    zero = np.zeros((1, env_cfg.n_actuators))
    y_hat = envs.y_hat
    for t in range(steps):
        y = envs.y[0]
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > env_cfg.blowup_threshold:
            return np.array(rows), False
        rows.append(y)
        obs = envs.observations()
        u = zero if (t < onset or policy is None) else np.clip(policy(obs), -1.0, 1.0)
        envs.y_hat = envs.physics_step(envs.y_hat, u, envs.forcing)
    return np.array(rows), True


def spatial_variance(fields: np.ndarray, start: int, stop: int) -> float:
    """Mean over rows [start, stop) of the spatial variance of each row."""
    return float(np.mean(np.var(fields[start:stop], axis=1)))


def render_heatmap(fields: np.ndarray, path, dt_ctrl: float, L: float, onset: int, center: float = 0.0, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vmax = float(np.nanmax(np.abs(fields - center))) or 1.0
    fig, ax = plt.subplots(figsize=(5, 6))
    extent = (0.0, L, fields.shape[0] * dt_ctrl, 0.0)
    im = ax.imshow(fields, aspect="auto", cmap="RdBu_r", vmin=center - vmax, vmax=center + vmax, extent=extent)
    ax.axhline(onset * dt_ctrl, color="k", lw=1.0, ls="--")
    ax.text(L * 0.98, onset * dt_ctrl, "control on", ha="right", va="bottom", fontsize=8)
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="y(x, t)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def heatmap(checkpoint, mu: float, case: str, out_dir, seed: int | None = None) -> dict:
    """Write ``heatmaps/<tag>.csv`` (+ JSON sidecar) and ``heatmaps/<tag>.png``."""
    agent, manifest = load_policy(checkpoint)
    cfg = agent.cfg
    env_cfg = case_env_config(cfg, case)
    seed = heatmap_seed(mu, case) if seed is None else seed
    fields, stable = heatmap_rollout(cfg, agent.policy, mu, case, seed)
    out = Path(out_dir) / "heatmaps"
    tag = f"{case}_mu{mu:+.4f}"
    meta = {
        "mu": mu,
        "case": case,
        "seed": seed,
        "config_hash": manifest["config_hash"],
        "env_hash": env_cfg.hash(),
        "stable": stable,
        "control_onset": CONTROL_ONSET,
        "rows": int(fields.shape[0]),
    }
    if fields.shape[0] >= CONTROL_ONSET:
        meta["variance_pre"] = spatial_variance(_centered(fields, env_cfg), 300, 500)
        if fields.shape[0] >= HEATMAP_STEPS:
            meta["variance_post"] = spatial_variance(_centered(fields, env_cfg), 800, 1000)
    write_trajectory(out / f"{tag}.csv", fields, env_cfg.control_dt, meta)
    center = env_cfg.reference.offset if case == "cos4-offset" else 0.0
    render_heatmap(fields, out / f"{tag}.png", env_cfg.control_dt, env_cfg.L, CONTROL_ONSET, center, f"{case}, mu={mu:g}")
    return {"fields": fields, **meta}


def _centered(fields: np.ndarray, env_cfg) -> np.ndarray:
    """Tracking error field (y - y_ref); its spatial variance measures the cascade."""
    return fields - env_cfg.reference.profile(env_cfg.grid)


# ---------------------------------------------------------------- sweeps
def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def sweep(run_patterns, out_dir) -> dict:
    """Aggregate run directories (each with metrics.csv, run.json, optional report.json).

    Runs sharing a config hash are grouped as seeds of one configuration.
    Writes ``summary.json``, ``summary.csv`` and ``sweep.png`` into ``out_dir``.
    """
    dirs = []
    for pat in [run_patterns] if isinstance(run_patterns, (str, Path)) else run_patterns:
        dirs += sorted(Path(p) for p in glob.glob(str(pat)))
    groups: dict[str, list] = {}
    missing = []
    for d in dirs:
        if not (d / "metrics.csv").exists() or not (d / "run.json").exists():
            missing.append(str(d))
            continue
        run = json.loads((d / "run.json").read_text())
        report = json.loads((d / "report.json").read_text()) if (d / "report.json").exists() else None
        groups.setdefault(run["config_hash"], []).append({"dir": str(d), "run": run, "metrics": read_metrics(d / "metrics.csv"), "report": report})

    summary = {"groups": {}, "missing": missing}
    for h, runs in groups.items():
        summary["groups"][h] = aggregate_group(runs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "label", "n_runs", "runtime_s", "final_train_mean", "final_train_std",
                    "final_eval_mean", "final_eval_std", "test_min", "test_max", "test_std"])
        for h, g in summary["groups"].items():
            w.writerow([h, g["label"], g["n_runs"], g["runtime_s"], g["final_train_mean"], g["final_train_std"],
                        g["final_eval_mean"], g["final_eval_std"], g["test_min"], g["test_max"], g["test_std"]])
    if groups:
        plot_sweep(summary, out / "sweep.png")
    return summary


def aggregate_group(runs: list[dict]) -> dict:
    steps = runs[0]["metrics"]["step"]
    n = min(len(r["metrics"]["step"]) for r in runs)
    evals = np.array([r["metrics"]["eval_mean"][:n] for r in runs])
    trains = np.array([r["metrics"]["train_reward_rolling"][:n] for r in runs])
    final_train = trains[:, -1]
    final_eval = evals[:, -1]
    train_cfg = runs[0]["run"]["config"]["train"]
    g = {
        "label": f"{runs[0]['run']['config']['hypernet']['encoder']} GS={train_cfg['gradient_steps']}",
        "n_runs": len(runs),
        "runs": [r["dir"] for r in runs],
        "runtime_s": float(np.mean([r["run"].get("wall_clock_s", np.nan) for r in runs])),
        "steps": steps[:n].tolist(),
        "train_curve_mean": np.nanmean(trains, axis=0).tolist(),
        "eval_curve_mean": evals.mean(axis=0).tolist(),
        "eval_band_min": evals.min(axis=0).tolist(),
        "eval_band_max": evals.max(axis=0).tolist(),
        "final_train_mean": float(np.nanmean(final_train)),
        "final_train_std": float(np.nanstd(final_train)),
        "final_eval_mean": float(np.mean(final_eval)),
        "final_eval_std": float(np.std(final_eval)),
        "test_min": np.nan,
        "test_max": np.nan,
        "test_std": np.nan,
    }
    profiles = [r["report"]["policy"]["per_mu"] for r in runs if r["report"]]
    if profiles:
        mus = list(profiles[0].keys())
        per_mu = np.array([[p[m]["mean"] for m in mus] for p in profiles])
        g["test_mus"] = [float(m) for m in mus]
        g["test_profile_mean"] = per_mu.mean(axis=0).tolist()
        g["test_min"] = float(per_mu.min())
        g["test_max"] = float(per_mu.max())
        g["test_std"] = float(np.mean([np.std(row) for row in per_mu]))
    return g


def plot_sweep(summary: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(14, 4))
    for g in summary["groups"].values():
        steps = np.array(g["steps"])
        axes[0].plot(steps, g["train_curve_mean"], label=g["label"])
        axes[1].plot(steps, g["eval_curve_mean"], label=g["label"])
        axes[1].fill_between(steps, g["eval_band_min"], g["eval_band_max"], alpha=0.25)
        if "test_mus" in g:
            axes[2].plot(g["test_mus"], g["test_profile_mean"], "o-", label=g["label"])
    for ax, title, xl in zip(axes, ("training reward", "evaluation reward", "test reward"), ("env steps", "env steps", "mu")):
        ax.set_title(title)
        ax.set_xlabel(xl)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
