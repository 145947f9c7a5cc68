"""Differentiable primitives, spectral normalisation and AdamW with cosine annealing.

Reverse-mode differentiation itself is delegated to ``torch.autograd``; this
module pins down the exact primitive set the networks use, the power-iteration
spectral normaliser, and the optimiser so that all three can be checked in
isolation against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch
import torch.nn.functional as F
from torch import nn

SIGMA_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-5


def softsign(x: torch.Tensor) -> torch.Tensor:
    return x / (1.0 + x.abs())


def sort_pass_through(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Ascending stable sort; gradients are routed back to the pre-sort positions."""
    return torch.sort(x, dim=dim, stable=True).values


def layer_norm(x: torch.Tensor, weight=None, bias=None, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


PRIMITIVES: dict[str, Callable] = {
    "matmul": torch.matmul,
    "add": torch.add,
    "mul": torch.mul,
    "relu": torch.relu,
    "softsign": softsign,
    "sin": torch.sin,
    "cos": torch.cos,
    "exp": torch.exp,
    "layer_norm": layer_norm,
    "sum": torch.sum,
    "mean": torch.mean,
    "clip": lambda x: torch.clamp(x, -0.5, 0.5),
    "sort": sort_pass_through,
}


# ---------------------------------------------------------------- spectral norm
def power_iteration(W: torch.Tensor, u: torch.Tensor, n_iter: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
    """Refine left/right singular-vector estimates of ``W`` (no gradient)."""
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    with torch.no_grad():
        for _ in range(n_iter):
            wu = W.t() @ u
            v = F.normalize(wu, dim=0, eps=SIGMA_FLOOR)
            wv = W @ v
            if wv.norm() <= SIGMA_FLOOR:
                # W (or W^T u) vanishes, e.g. a zero-initialised head: keep the old
                # estimate so the iteration can resume once W moves away from zero
                return u, v
            u = F.normalize(wv, dim=0)
    return u, v


def spectral_sigma(W: torch.Tensor, u: torch.Tensor, n_iter: int = 1, update: bool = True, clamp: bool = False) -> torch.Tensor:
    """Power-iteration estimate ``u^T W v`` of the top singular value of ``W``.

    ``u`` is the persistent left-vector estimate (shape ``W.shape[0]``) and is
    overwritten in place when ``update`` is set.  ``u`` and ``v`` are treated
    as constants for the gradient, the usual estimator.  The estimate is
    floored at ``SIGMA_FLOOR``; with ``clamp`` it is floored at 1 instead.
    """
    if update:
        u_new, v = power_iteration(W, u, n_iter)
        u.copy_(u_new)
    else:
        with torch.no_grad():
            v = F.normalize(W.t() @ u, dim=0, eps=SIGMA_FLOOR)
    if clamp:
        with torch.no_grad():
            below = torch.dot(u, W @ v) <= 1.0
        if below:
            # clamp active: divisor is the constant 1 and carries no gradient
            return torch.ones((), dtype=W.dtype)
        return torch.dot(u, W @ v)
    return torch.dot(u, W @ v).clamp_min(SIGMA_FLOOR)


def spectral_normalize(
    W: torch.Tensor,
    u: torch.Tensor,
    n_iter: int = 1,
    update: bool = True,
    clamp: bool = False,
) -> torch.Tensor:
    """Return ``W / sigma`` (see :func:`spectral_sigma`).

    With ``clamp`` the divisor is ``max(sigma, 1)``: the map is only shrunk.
    """
    return W / spectral_sigma(W, u, n_iter, update, clamp)


class SNLinear(nn.Module):
    """Affine map whose weight is spectrally normalised on every forward.

    One power-iteration step runs per forward call in training mode; in eval
    mode the stored estimate is used as is.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True, clamp: bool = False, zero_init: bool = False):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.clamp = clamp
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        self.register_buffer("u", F.normalize(torch.randn(out_features), dim=0))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
            if self.bias is not None:
                bound = 1.0 / math.sqrt(in_features)
                nn.init.uniform_(self.bias, -bound, bound)

    def normalized_weight(self) -> torch.Tensor:
        return spectral_normalize(self.weight, self.u, update=self.training, clamp=self.clamp)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (W x) / sigma avoids materialising W / sigma for the wide head matrices
        sigma = spectral_sigma(self.weight, self.u, update=self.training, clamp=self.clamp)
        out = F.linear(x, self.weight) / sigma
        return out if self.bias is None else out + self.bias

    def extra_repr(self) -> str:
        return f"in={self.in_features}, out={self.out_features}, clamp={self.clamp}"


# ---------------------------------------------------------------- optimiser
def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi t / T)) / 2, reaching exactly 0 at t >= T."""
    if total_steps <= 0:
        return base_lr
    t = min(step, total_steps)
    if t == total_steps:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class OptimizerState:
    params: list[torch.Tensor]
    base_lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    total_steps: int = 0
    step: int = 0
    skipped: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.exp_avg:
            self.exp_avg = [torch.zeros_like(p) for p in self.params]
            self.exp_avg_sq = [torch.zeros_like(p) for p in self.params]

    @property
    def lr(self) -> float:
        return cosine_lr(self.step, self.total_steps, self.base_lr)

    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {f"{prefix}.step": torch.tensor(self.step), f"{prefix}.skipped": torch.tensor(self.skipped)}
        for i, (m, v) in enumerate(zip(self.exp_avg, self.exp_avg_sq)):
            out[f"{prefix}.m.{i}"] = m
            out[f"{prefix}.v.{i}"] = v
        return out

    def load_state_dict(self, prefix: str, d: dict) -> None:
        self.step = int(d[f"{prefix}.step"])
        self.skipped = int(d[f"{prefix}.skipped"])
        for i in range(len(self.params)):
            self.exp_avg[i].copy_(torch.as_tensor(d[f"{prefix}.m.{i}"]))
            self.exp_avg_sq[i].copy_(torch.as_tensor(d[f"{prefix}.v.{i}"]))


@torch.no_grad()
def adamw_step(state: OptimizerState, grads: Iterable[torch.Tensor | None] | None = None) -> bool:
    """One decoupled-weight-decay Adam step at the cosine-annealed learning rate.

    ``grads`` defaults to each parameter's ``.grad``.  If any gradient is
    non-finite the update is skipped (``state.skipped`` is incremented) and
    ``False`` is returned; the schedule advances only on applied steps.
    """
    grads = [p.grad for p in state.params] if grads is None else list(grads)
    live = [i for i, g in enumerate(grads) if g is not None]
    if not live:
        return True
    params = [state.params[i] for i in live]
    g = [grads[i] for i in live]
    m = [state.exp_avg[i] for i in live]
    v = [state.exp_avg_sq[i] for i in live]
    if not torch.isfinite(torch.stack(torch._foreach_norm(g))).all():
        state.skipped += 1
        return False
    lr = state.lr
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    torch._foreach_mul_(params, 1.0 - lr * state.weight_decay)
    torch._foreach_lerp_(m, g, 1.0 - b1)
    torch._foreach_mul_(v, b2)
    torch._foreach_addcmul_(v, g, g, value=1.0 - b2)
    denom = torch._foreach_sqrt(v)
    torch._foreach_div_(denom, math.sqrt(bc2))
    torch._foreach_add_(denom, state.eps)
    torch._foreach_addcdiv_(params, m, denom, value=-lr / bc1)
    return True


# ---------------------------------------------------------------- checks
def finite_difference_grad(f: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of scalar ``f()`` w.r.t. tensor ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-30)
    return num / den
