"""Truncated Quantile Critics: pooled/truncated targets and the quantile Huber loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .autodiff import sort_pass_through

HUBER_KAPPA = 1.0


@dataclass(frozen=True)
class TqcTargetSpec:
    n_quantiles: int = 25
    n_critics: int = 2
    drop: int = 5

    def __post_init__(self):
        if not 0 <= self.drop < self.pooled:
            raise ValueError(f"drop must satisfy 0 <= d < {self.pooled}, got {self.drop}")

    @property
    def pooled(self) -> int:
        return self.n_critics * self.n_quantiles

    @property
    def kept(self) -> int:
        return self.pooled - self.drop


def quantile_midpoints(M: int, dtype=torch.float64) -> torch.Tensor:
    """tau_hat_m = (m - 0.5) / M for m = 1..M."""
    return (torch.arange(M, dtype=dtype) + 0.5) / M


def tqc_targets(next_atoms: torch.Tensor, n_step_return: torch.Tensor, discount: torch.Tensor, drop: int) -> torch.Tensor:
    """R + gamma_eff * (lowest pooled atoms).

    ``next_atoms`` has shape (B, n_critics, M) (or (n_critics, M) for one
    sample).  Atoms are pooled across critics, sorted ascending with a stable
    sort (ties fall back to critic-major pooling order), the top ``drop`` are
    discarded.  Returns (B, n_critics*M - drop).
    """
    single = next_atoms.dim() == 2
    if single:
        next_atoms = next_atoms.unsqueeze(0)
    if not torch.isfinite(next_atoms).all():
        raise FloatingPointError("non-finite target atoms")
    B = next_atoms.shape[0]
    pooled = next_atoms.reshape(B, -1)
    if not 0 <= drop < pooled.shape[1]:
        raise ValueError(f"drop={drop} out of range for {pooled.shape[1]} pooled atoms")
    kept = sort_pass_through(pooled, dim=1)[:, : pooled.shape[1] - drop]
    R = torch.as_tensor(n_step_return, dtype=kept.dtype).reshape(-1, 1)
    g = torch.as_tensor(discount, dtype=kept.dtype).reshape(-1, 1)
    out = R + g * kept
    return out[0] if single else out


def huber(delta: torch.Tensor, kappa: float = HUBER_KAPPA) -> torch.Tensor:
    a = delta.abs()
    return torch.where(a <= kappa, 0.5 * delta**2, kappa * (a - 0.5 * kappa))


def quantile_huber_loss(pred: torch.Tensor, targets: torch.Tensor, taus: torch.Tensor | None = None) -> torch.Tensor:
    """(1/B) sum_b sum_critics sum_m sum_j |tau_m - 1[delta<0]| * Huber(delta), delta = Y_j - q_m.

    ``pred``: (B, n_critics, M) or (B, M); ``targets``: (B, J), treated as constants.
    """
    if pred.dim() == 2:
        pred = pred.unsqueeze(1)
    if targets.dim() != 2 or targets.shape[0] != pred.shape[0]:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)}, targets {tuple(targets.shape)}")
    M = pred.shape[-1]
    if taus is None:
        taus = quantile_midpoints(M, pred.dtype)
    delta = targets.detach()[:, None, None, :] - pred[..., None]  # (B, C, M, J)
    weight = (taus[:, None] - (delta < 0).to(pred.dtype)).abs()
    return (weight * huber(delta)).sum() / pred.shape[0]


def truncation_mean(kept: torch.Tensor) -> torch.Tensor:
    if kept.numel() == 0:
        raise ValueError("empty target set")
    return kept.mean(dim=-1)
