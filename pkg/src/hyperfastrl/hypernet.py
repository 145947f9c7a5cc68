"""Hypernetworks mapping the forcing parameter mu to actor/critic weights.

Three encoders produce a latent ``z`` from the scaled parameter
``mu_tilde = mu / 0.0225``: a residual MLP, the same ResNet behind a random
Fourier feature map, and an ActNet (sinusoidal KAN) ResNet.  Heads then emit,
per target layer, a weight matrix ``W``, a bias ``b`` and a per-neuron scale
``s = 1 + head(z)``.  There is one hypernetwork per target network (actor,
critic 1, critic 2).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import SNLinear, layer_norm, softsign

MU_SCALE = 0.0225
ENCODERS = ("mlp", "fourier", "kan")
VAR_FLOOR = 1e-6


def scale_mu(mu):
    """Raw mu in [-0.225, 0.225] -> mu_tilde in [-10, 10]."""
    return mu / MU_SCALE


@dataclass(frozen=True)
class HypernetConfig:
    encoder: str = "mlp"
    widths: tuple[int, ...] = (256, 512, 1024)
    blocks_per_stage: int = 2
    mapping_size: int = 256
    fourier_sigma: float = 1.0
    n_basis: int = 64
    obs_dim: int = 64
    act_dim: int = 8
    hidden: int = 256
    n_quantiles: int = 25
    n_critics: int = 2
    head_gain: float | None = None  # None -> 1 / latent width

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def latent_gain(self) -> float:
        return 1.0 / self.widths[-1] if self.head_gain is None else float(self.head_gain)

    @property
    def actor_layers(self) -> list[tuple[int, int]]:
        return [(self.obs_dim, self.hidden), (self.hidden, self.act_dim)]

    @property
    def critic_layers(self) -> list[tuple[int, int]]:
        return [(self.obs_dim + self.act_dim, self.hidden), (self.hidden, self.n_quantiles)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


# ---------------------------------------------------------------- encoders
class FourierFeatures(nn.Module):
    """gamma(m) = [m, sin(2 pi sigma B m), cos(2 pi sigma B m)] with frozen B ~ N(0, 1)."""

    def __init__(self, mapping_size: int = 256, sigma: float = 1.0):
        super().__init__()
        self.B = nn.Parameter(torch.randn(mapping_size), requires_grad=False)
        self.sigma = nn.Parameter(torch.tensor(float(sigma)), requires_grad=False)

    @property
    def out_dim(self) -> int:
        return 1 + 2 * self.B.numel()

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        m = m.reshape(-1, 1)
        proj = 2 * math.pi * self.sigma * m * self.B
        return torch.cat([m, torch.sin(proj), torch.cos(proj)], dim=-1)


def fourier_embed(mu_tilde, features: FourierFeatures) -> torch.Tensor:
    return features(torch.as_tensor(mu_tilde, dtype=features.B.dtype))


def basis_moments(omega_eff: torch.Tensor, phase: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and variance of sin(w x + p) for x ~ N(0, 1)."""
    mean = torch.exp(-0.5 * omega_eff**2) * torch.sin(phase)
    var = 0.5 - 0.5 * torch.exp(-2.0 * omega_eff**2) * torch.cos(2.0 * phase) - mean**2
    return mean, var


class ActNetLayer(nn.Module):
    """h' = sum_k beta_k * (psi_hat_k(h) @ Lambda) + W_lin h + b.

    ``psi_k(x) = sin(omega_k * w0 * x + phi_k)`` is standardised with its
    closed-form Gaussian moments, so inputs are expected to be LayerNorm-ed.
    ``linear_branch=False`` drops ``W_lin`` (used for the weight heads);
    ``zero_init`` zeroes ``beta`` so the layer starts as its bias.
    """

    def __init__(self, d_in: int, d_out: int, n_basis: int = 64, linear_branch: bool = True, zero_init: bool = False,
                 gain: float = 1.0):
        super().__init__()
        self.d_in, self.d_out, self.n_basis = d_in, d_out, n_basis
        self.gain = gain
        self.omega = nn.Parameter(torch.randn(n_basis))
        self.phase = nn.Parameter(torch.zeros(n_basis))
        self.w0 = nn.Parameter(torch.tensor(1.0))
        self.Lambda = nn.Parameter(torch.empty(d_in, d_out).uniform_(-1, 1) / math.sqrt(d_in))
        beta = torch.zeros(n_basis, d_out) if zero_init else torch.randn(n_basis, d_out) / math.sqrt(n_basis)
        self.beta = nn.Parameter(beta)
        self.bias = nn.Parameter(torch.zeros(d_out))
        self.linear = SNLinear(d_in, d_out, bias=False) if linear_branch else None

    def normalized_basis(self, h: torch.Tensor) -> torch.Tensor:
        w = self.omega * self.w0
        mean, var = basis_moments(w, self.phase)
        psi = torch.sin(h.unsqueeze(-2) * w[:, None] + self.phase[:, None])  # (..., K, d_in)
        return (psi - mean[:, None]) / torch.sqrt(var[:, None] + VAR_FLOOR)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        mixed = self.normalized_basis(h) @ self.Lambda  # (..., K, d_out)
        out = self.gain * (self.beta * mixed).sum(dim=-2) + self.bias
        if self.linear is not None:
            out = out + self.linear(h)
        return out


def actnet_layer(h: torch.Tensor, layer: ActNetLayer) -> torch.Tensor:
    return layer(h)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = SNLinear(width, width)
        self.fc2 = SNLinear(width, width)

    def forward(self, h):
        return torch.relu(h + self.fc2(torch.relu(self.fc1(h))))


class ActNetBlock(nn.Module):
    def __init__(self, width: int, n_basis: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.act = ActNetLayer(width, width, n_basis)

    def forward(self, h):
        return h + self.act(self.norm(h))


class ResNetEncoder(nn.Module):
    """Stages of width ``widths``; each is a projection, residual blocks, LayerNorm."""

    def __init__(self, d_in: int, widths, blocks_per_stage: int = 2, kan_basis: int | None = None):
        super().__init__()
        stages = []
        d = d_in
        for w in widths:
            if kan_basis is None:
                blocks = [ResidualBlock(w) for _ in range(blocks_per_stage)]
            else:
                blocks = [ActNetBlock(w, kan_basis) for _ in range(blocks_per_stage)]
            stages.append(nn.ModuleDict({"proj": SNLinear(d, w), "blocks": nn.Sequential(*blocks), "norm": nn.LayerNorm(w)}))
            d = w
        self.stages = nn.ModuleList(stages)
        self.out_dim = d

    def forward(self, x):
        h = x
        for st in self.stages:
            h = st["proj"](h)
            h = st["norm"](st["blocks"](h))
        return h


def build_encoder(cfg: HypernetConfig) -> nn.Module:
    if cfg.encoder == "mlp":
        return ResNetEncoder(1, cfg.widths, cfg.blocks_per_stage)
    if cfg.encoder == "fourier":
        ff = FourierFeatures(cfg.mapping_size, cfg.fourier_sigma)
        enc = ResNetEncoder(ff.out_dim, cfg.widths, cfg.blocks_per_stage)
        return nn.Sequential(ff, enc)
    return ResNetEncoder(1, cfg.widths, cfg.blocks_per_stage, kan_basis=cfg.n_basis)


# ---------------------------------------------------------------- heads
class AffineHead(nn.Module):
    """out = A (gain * z) + c with A zero-initialised and (clamped) spectrally normalised.

    ``gain`` keeps an Adam step on A from moving every generated weight by
    ~lr * |z|_1, which would dwarf the scale of the target network.
    """

    def __init__(self, d_latent: int, d_out: int, bias_bound: float = 0.0, gain: float = 1.0):
        super().__init__()
        self.gain = gain
        self.lin = SNLinear(d_latent, d_out, clamp=True, zero_init=True)
        with torch.no_grad():
            self.lin.bias.uniform_(-bias_bound, bias_bound) if bias_bound else self.lin.bias.zero_()

    def forward(self, z):
        return self.lin(z * self.gain)


class KanHead(nn.Module):
    def __init__(self, d_latent: int, d_out: int, n_basis: int, bias_bound: float = 0.0, gain: float = 1.0):
        super().__init__()
        self.act = ActNetLayer(d_latent, d_out, n_basis, linear_branch=False, zero_init=True, gain=gain)
        with torch.no_grad():
            self.act.bias.uniform_(-bias_bound, bias_bound) if bias_bound else self.act.bias.zero_()

    def forward(self, z):
        return self.act(z)


@dataclass
class GeneratedWeights:
    """Target-network tensors for each unique conditioning value.

    ``layers[l] = (W, b, s)`` with shapes ``(U, out, in)``, ``(U, out)``,
    ``(U, out)``; ``index[i]`` is the unique row used by batch sample ``i``.
    """

    layers: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]
    index: torch.Tensor
    n_evaluations: int = 0

    def gather(self) -> list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        """Per-sample copies (B, ...) of every tensor (tests / inspection only)."""
        return [(W[self.index], b[self.index], s[self.index]) for W, b, s in self.layers]


class HyperNetwork(nn.Module):
    """Encoder plus W/b/s heads for one target network."""

    def __init__(self, cfg: HypernetConfig, layer_sizes: list[tuple[int, int]]):
        super().__init__()
        self.cfg = cfg
        self.layer_sizes = list(layer_sizes)
        self.encoder = build_encoder(cfg)
        d = cfg.widths[-1]
        g = cfg.latent_gain
        heads = []
        for d_in, d_out in self.layer_sizes:
            bound = 1.0 / math.sqrt(d_in)
            if cfg.encoder == "kan":
                make = lambda n, bb=0.0: KanHead(d, n, cfg.n_basis, bb, g)
            else:
                make = lambda n, bb=0.0: AffineHead(d, n, bb, g)
            heads.append(nn.ModuleDict({"W": make(d_in * d_out, bound), "b": make(d_out, bound), "s": make(d_out)}))
        self.heads = nn.ModuleList(heads)
        self.encoder_evaluations = 0

    def latent(self, mu_tilde: torch.Tensor) -> torch.Tensor:
        self.encoder_evaluations += mu_tilde.numel()
        return self.encoder(mu_tilde.reshape(-1, 1))

    def forward(self, mu_tilde: torch.Tensor):
        z = self.latent(mu_tilde)
        out = []
        for (d_in, d_out), h in zip(self.layer_sizes, self.heads):
            W = h["W"](z).reshape(-1, d_out, d_in)
            out.append((W, h["b"](z), 1.0 + h["s"](z)))
        return out


def generate_weights(mu_tilde: torch.Tensor, hypernet: HyperNetwork, dedup: bool = True) -> GeneratedWeights:
    """Evaluate ``hypernet`` once per unique value of ``mu_tilde`` (shape (B,))."""
    mu_tilde = torch.as_tensor(mu_tilde).reshape(-1)
    if mu_tilde.numel() == 0:
        raise ValueError("empty conditioning batch")
    if dedup:
        uniq, index = torch.unique(mu_tilde, sorted=True, return_inverse=True)
    else:
        uniq, index = mu_tilde, torch.arange(mu_tilde.numel())
    return GeneratedWeights(hypernet(uniq), index, n_evaluations=uniq.numel())


def _mlp_forward(x, layers, final):
    h = x
    n = len(layers)
    for i, (W, b, s) in enumerate(layers):
        pre = s * (h @ W.transpose(-1, -2)) + b
        if i < n - 1:
            h = torch.relu(pre)
        elif final == "softsign":
            h = softsign(pre)
        else:
            h = pre
    return h


def generated_forward(x: torch.Tensor, weights: GeneratedWeights, role: str = "actor") -> torch.Tensor:
    """Run the generated target network on a batch.

    Samples are grouped by their unique conditioning row so each group is a
    plain dense forward pass; output order matches input order.  The actor
    ends in softsign, the critic emits raw quantile atoms.
    """
    if role not in ("actor", "critic"):
        raise ValueError(f"role must be 'actor' or 'critic', got {role!r}")
    final = "softsign" if role == "actor" else None
    d_in = weights.layers[0][0].shape[-1]
    if x.shape[-1] != d_in or x.shape[0] != weights.index.numel():
        raise ValueError(f"input shape {tuple(x.shape)} does not match weights (B={weights.index.numel()}, in={d_in})")
    U = weights.layers[0][0].shape[0]
    if U == 1:
        return _mlp_forward(x, [(W[0], b[0], s[0]) for W, b, s in weights.layers], final)
    order = torch.argsort(weights.index, stable=True)
    counts = torch.bincount(weights.index, minlength=U).tolist()
    chunks = torch.split(x[order], counts)
    outs = [
        _mlp_forward(chunk, [(W[u], b[u], s[u]) for W, b, s in weights.layers], final)
        for u, chunk in enumerate(chunks)
        if counts[u]
    ]
    out = torch.cat(outs)
    return out[torch.argsort(order)]


class HyperActorCritic(nn.Module):
    """Actor hypernetwork plus ``n_critics`` critic hypernetworks."""

    def __init__(self, cfg: HypernetConfig):
        super().__init__()
        self.cfg = cfg
        self.actor = HyperNetwork(cfg, cfg.actor_layers)
        self.critics = nn.ModuleList([HyperNetwork(cfg, cfg.critic_layers) for _ in range(cfg.n_critics)])

    def act(self, obs_y: torch.Tensor, mu_tilde: torch.Tensor) -> torch.Tensor:
        return generated_forward(obs_y, generate_weights(mu_tilde, self.actor), "actor")

    def quantiles(self, obs_y: torch.Tensor, action: torch.Tensor, mu_tilde: torch.Tensor, critics=None) -> torch.Tensor:
        """(B, n_critics, M) quantile atoms; ``critics`` selects a subset of heads."""
        x = torch.cat([obs_y, action], dim=-1)
        idx = range(len(self.critics)) if critics is None else critics
        return torch.stack([generated_forward(x, generate_weights(mu_tilde, self.critics[i]), "critic") for i in idx], dim=1)


def count_parameters(module: nn.Module) -> tuple[int, int, int]:
    """(trainable, frozen, total) parameter counts.

    Power-iteration vectors are estimator state, not parameters, and are not counted.
    """
    trainable = sum(p.numel() for p in module.parameters() if p.requires_grad)
    frozen = sum(p.numel() for p in module.parameters() if not p.requires_grad)
    return trainable, frozen, trainable + frozen


def full_scale_census(encoder: str) -> tuple[int, int, int]:
    """Parameter census of the full-width (256-512-1024) model, built on the meta device."""
    with torch.device("meta"):
        model = HyperActorCritic(HypernetConfig(encoder=encoder))
    return count_parameters(model)
