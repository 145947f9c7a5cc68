"""Vectorised MDP over the controlled, parametrically forced KS equation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .spectral import (
    Etdrk4Coefficients,
    GridSpec,
    ZeroModePolicy,
    etdrk4_step,
    is_unstable,
    precompute_etdrk4,
    to_physical,
    to_spectral,
)

MU_TRAIN_RANGE = 0.225
MU_GRID = tuple(round(-0.225 + k * 0.025, 10) for k in range(19))
CASES = ("zero", "cos4", "cos4-offset")


class EnvContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class ActuatorBank:
    grid: GridSpec
    n_actuators: int = 8
    width: float = 0.8
    amplitude: float = 1.0

    @property
    def centers(self) -> np.ndarray:
        return np.arange(self.n_actuators) * self.grid.L / self.n_actuators

    def evaluate(self, x) -> np.ndarray:
        """g_i(x) at arbitrary points; shape (n_actuators, len(x))."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64)) % self.grid.L
        diff = np.abs(x[None, :] - self.centers[:, None])
        dist = np.minimum(diff, self.grid.L - diff)
        return self.amplitude * np.exp(-((dist / self.width) ** 2))

    @property
    def kernels(self) -> np.ndarray:
        """(n_actuators, N) matrix of g_i(x_j) with periodic distance."""
        return self.evaluate(self.grid.x)


@dataclass(frozen=True)
class ReferenceTarget:
    case: str = "zero"
    amplitudes: tuple[float, ...] = (0.5, 0.5, 0.5, 0.5)
    offset: float = 0.5

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown reference case {self.case!r}; expected one of {CASES}")

    def profile(self, grid: GridSpec) -> np.ndarray:
        if self.case == "zero":
            return np.zeros(grid.N)
        y = sum(a * np.cos(2 * np.pi * (k + 1) * grid.x / grid.L) for k, a in enumerate(self.amplitudes))
        if self.case == "cos4-offset":
            y = y + self.offset
        return y

    @property
    def zero_mode(self) -> ZeroModePolicy:
        if self.case == "cos4-offset":
            return ZeroModePolicy.pin_to(self.offset)
        return ZeroModePolicy.zero_mean()


@dataclass(frozen=True)
class EnvConfig:
    L: float = 22.0
    N: int = 64
    dt: float = 0.05
    substeps_per_action: int = 4
    n_actuators: int = 8
    actuator_width: float = 0.8
    actuator_amplitude: float = 1.0
    mu_grid: tuple[float, ...] = MU_GRID
    burn_in_steps: int = 100
    max_steps: int = 250
    blowup_threshold: float = 1e3
    alpha: float = 0.1
    reference: ReferenceTarget = field(default_factory=ReferenceTarget)
    init_modes: int = 8
    init_energy: float | None = None  # ||y||_L2^2; defaults to L (RMS amplitude 1)
    max_reset_attempts: int = 5

    def __post_init__(self):
        if self.burn_in_steps < 0:
            raise ValueError("burn_in_steps must be >= 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.substeps_per_action < 1:
            raise ValueError("substeps_per_action must be >= 1")
        object.__setattr__(self, "mu_grid", tuple(float(m) for m in self.mu_grid))
        if isinstance(self.reference, dict):
            ref = dict(self.reference)
            if "amplitudes" in ref:
                ref["amplitudes"] = tuple(ref["amplitudes"])
            object.__setattr__(self, "reference", ReferenceTarget(**ref))

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.L, self.N)

    @property
    def target_energy(self) -> float:
        return self.L if self.init_energy is None else self.init_energy

    @property
    def control_dt(self) -> float:
        return self.dt * self.substeps_per_action

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mu_grid"] = list(self.mu_grid)
        d["reference"]["amplitudes"] = list(self.reference.amplitudes)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def forcing_field(mu: float | np.ndarray, grid: GridSpec) -> np.ndarray:
    """mu * cos(4 pi x / L); broadcasts over an array of mu values."""
    mu = np.asarray(mu, dtype=np.float64)
    return mu[..., None] * np.cos(4 * np.pi * grid.x / grid.L)


def control_field(u: np.ndarray, bank: ActuatorBank | np.ndarray) -> np.ndarray:
    """sum_i u_i g_i(x); actions outside [-1, 1] are clipped first."""
    G = bank.kernels if isinstance(bank, ActuatorBank) else bank
    u = np.clip(np.asarray(u, dtype=np.float64), -1.0, 1.0)
    # fixed-order accumulation: BLAS matmul picks kernels by batch size, which
    # would break bitwise equality between batched and single-slot stepping
    out = np.zeros(u.shape[:-1] + G.shape[-1:])
    for i in range(G.shape[0]):
        out += u[..., i, None] * G[i]
    return out


def l2_norm_sq(f: np.ndarray, grid: GridSpec) -> np.ndarray:
    return grid.dx * np.sum(f * f, axis=-1)


def reward(y: np.ndarray, u: np.ndarray, y_ref: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """-(||y - y_ref||^2_L2 + alpha * dx * ||u||^2) / (2 T_max); vectorised over leading axes."""
    grid = cfg.grid
    e = np.asarray(y) - y_ref
    u = np.asarray(u, dtype=np.float64)
    effort = cfg.alpha * grid.dx * np.sum(u * u, axis=-1)
    return -(l2_norm_sq(e, grid) + effort) / (2.0 * cfg.max_steps)


@dataclass
class EnvState:
    y: np.ndarray
    mu: float
    step_count: int = 0
    done: bool = False

    @property
    def observation(self) -> np.ndarray:
        return np.append(self.y, self.mu)


class KSEnsemble:
    """N_env independent controlled KS instances stepped in lock-step.

    Slot ``i`` always runs at ``mu_grid[i % len(mu_grid)]`` (or an explicit
    ``mus`` array).  Every reset of slot ``i`` draws from its own generator
    seeded by ``(seed, i, reset_count)``, so results never depend on the order
    in which slots are processed.
    """

    def __init__(self, cfg: EnvConfig, n_envs: int, seed: int = 0, mus=None, slot_offset: int = 0):
        self.cfg = cfg
        self.slot_offset = slot_offset
        self.grid = cfg.grid
        self.n_envs = n_envs
        self.seed = seed
        if mus is None:
            mus = [cfg.mu_grid[i % len(cfg.mu_grid)] for i in range(n_envs)]
        self.mus = np.asarray(mus, dtype=np.float64)
        if self.mus.shape != (n_envs,):
            raise ValueError(f"expected {n_envs} mu values, got shape {self.mus.shape}")
        self.bank = ActuatorBank(self.grid, cfg.n_actuators, cfg.actuator_width, cfg.actuator_amplitude)
        self.G = self.bank.kernels
        self.coeffs: Etdrk4Coefficients = precompute_etdrk4(self.grid, cfg.dt)
        self.zero_mode = cfg.reference.zero_mode
        self.y_ref = cfg.reference.profile(self.grid)
        self.forcing = forcing_field(self.mus, self.grid)
        self.reset_counts = np.zeros(n_envs, dtype=np.int64)
        self.y_hat = np.zeros((n_envs, self.grid.N), dtype=np.complex128)
        self.step_count = np.zeros(n_envs, dtype=np.int64)
        self.done = np.ones(n_envs, dtype=bool)

    # ------------------------------------------------------------------ reset
    def slot_rng(self, i: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.slot_offset + i, int(self.reset_counts[i])])

    def initial_field(self, rng: np.random.Generator) -> np.ndarray:
        """Random superposition of sine modes 1..init_modes scaled to the target energy."""
        x = self.grid.x
        m = np.arange(1, self.cfg.init_modes + 1)
        amp = rng.standard_normal(m.size)
        phase = rng.uniform(0.0, 2 * np.pi, m.size)
        y = np.sum(amp[:, None] * np.sin(2 * np.pi * m[:, None] * x[None, :] / self.grid.L + phase[:, None]), axis=0)
        y -= y.mean()
        y *= np.sqrt(self.cfg.target_energy / l2_norm_sq(y, self.grid))
        return y

    def advance(self, y_hat: np.ndarray, forcing: np.ndarray, n_substeps: int) -> np.ndarray:
        """Hold ``forcing`` (physical, broadcastable) fixed for ``n_substeps`` substeps."""
        f_hat = to_spectral(forcing)
        for _ in range(n_substeps):
            y_hat = etdrk4_step(y_hat, f_hat, self.coeffs, self.zero_mode)
        return y_hat

    def reset_slot(self, i: int) -> np.ndarray:
        cfg = self.cfg
        for _ in range(cfg.max_reset_attempts):
            rng = self.slot_rng(i)
            self.reset_counts[i] += 1
            y0 = self.initial_field(rng)
            extra = int(rng.integers(0, cfg.burn_in_steps + 1)) if cfg.burn_in_steps else 0
            y_hat = to_spectral(y0)[None]
            self.zero_mode.apply(y_hat, self.grid.N)
            with np.errstate(all="ignore"):
                y_hat = self.advance(y_hat, self.forcing[i], cfg.burn_in_steps + extra)
            y = to_physical(y_hat)
            if not is_unstable(y, cfg.blowup_threshold)[0]:
                self.y_hat[i] = y_hat[0]
                self.step_count[i] = 0
                self.done[i] = False
                return y[0]
        raise EnvContractError(f"slot {i}: burn-in unstable after {cfg.max_reset_attempts} attempts")

    def reset(self, indices=None) -> np.ndarray:
        idx = range(self.n_envs) if indices is None else indices
        for i in idx:
            self.reset_slot(int(i))
        return self.observations()

    # ------------------------------------------------------------------ step
    @property
    def y(self) -> np.ndarray:
        return to_physical(self.y_hat)

    def observations(self, y: np.ndarray | None = None) -> np.ndarray:
        y = self.y if y is None else y
        return np.concatenate([y, self.mus[:, None]], axis=1)

    def physics_step(self, y_hat: np.ndarray, u: np.ndarray, forcing: np.ndarray) -> np.ndarray:
        with np.errstate(all="ignore"):
            return self.advance(y_hat, forcing + control_field(u, self.G), self.cfg.substeps_per_action)

    def step(self, actions: np.ndarray, auto_reset: bool = True):
        """Advance every slot one control interval.

        Returns ``(obs, reward, done, info)``.  ``info`` carries
        ``terminated`` (instability), ``truncated`` (horizon reached),
        ``instability`` and ``final_obs`` (the pre-reset observation).  With
        ``auto_reset`` finished slots are reset in place and ``obs`` holds
        their fresh observation.
        """
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n_envs, self.cfg.n_actuators):
            raise ValueError(f"actions must have shape {(self.n_envs, self.cfg.n_actuators)}, got {actions.shape}")
        if np.any(self.done):
            raise EnvContractError("step called on finished environment slot(s); reset first")
        actions = np.clip(actions, -1.0, 1.0)
        self.y_hat = self.physics_step(self.y_hat, actions, self.forcing)
        y = to_physical(self.y_hat)
        unstable = is_unstable(y, self.cfg.blowup_threshold)
        r = reward(y, actions, self.y_ref, self.cfg)
        self.step_count += 1
        truncated = (self.step_count >= self.cfg.max_steps) & ~unstable
        done = unstable | truncated
        self.done = done.copy()
        final_obs = self.observations(y)
        info = {
            "terminated": unstable.copy(),
            "truncated": truncated,
            "instability": unstable.copy(),
            "final_obs": final_obs,
        }
        obs = final_obs.copy()
        if auto_reset and np.any(done):
            for i in np.flatnonzero(done):
                self.reset_slot(int(i))
                obs[i] = np.append(self.y[i], self.mus[i])
        return obs, r, done, info


class KSEnv:
    """Single-instance facade: an ensemble of one occupying slot ``slot``."""

    def __init__(self, cfg: EnvConfig, mu: float = 0.0, seed: int = 0, slot: int = 0):
        self.cfg = cfg
        self.ensemble = KSEnsemble(cfg, 1, seed=seed, mus=[mu], slot_offset=slot)

    def state(self) -> EnvState:
        ens = self.ensemble
        return EnvState(ens.y[0], float(ens.mus[0]), int(ens.step_count[0]), bool(ens.done[0]))

    def reset(self) -> np.ndarray:
        return self.ensemble.reset()[0]

    def step(self, u):
        obs, r, done, info = self.ensemble.step(np.asarray(u, dtype=np.float64)[None], auto_reset=False)
        return obs[0], float(r[0]), bool(done[0]), {k: v[0] for k, v in info.items()}


def write_trajectory(path, fields: np.ndarray, dt_ctrl: float, meta: dict) -> None:
    """CSV (t, x_0..x_{N-1}) plus a JSON sidecar with the same stem."""
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = fields.shape[1]
    t = np.arange(fields.shape[0]) * dt_ctrl
    header = ",".join(["t"] + [f"x_{j}" for j in range(n)])
    np.savetxt(path, np.column_stack([t, fields]), delimiter=",", header=header, comments="", fmt="%.10g")
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
