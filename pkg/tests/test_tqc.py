from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperfastrl.tqc import TqcTargetSpec, huber, quantile_huber_loss, quantile_midpoints, tqc_targets, truncation_mean

from oracles import quantile_huber_scalar, tqc_targets_bruteforce

torch.set_default_dtype(torch.float64)


def test_target_spec():
    s = TqcTargetSpec()
    assert (s.pooled, s.kept) == (50, 45)
    with pytest.raises(ValueError):
        TqcTargetSpec(drop=50)


def test_midpoints():
    tau = quantile_midpoints(25)
    assert tau[0].item() == pytest.approx(0.02) and tau[-1].item() == pytest.approx(0.98)
    assert torch.all(tau[1:] > tau[:-1])


def test_targets_hand_example():
    atoms = torch.tensor([[1.0, 3.0], [2.0, 4.0]])
    assert tqc_targets(atoms, 0.0, 1.0, 1).tolist() == [1.0, 2.0, 3.0]


def test_targets_no_truncation_and_terminal():
    atoms = torch.tensor([[[0.5, -1.0], [2.0, 0.0]]])
    out = tqc_targets(atoms, torch.tensor([1.5]), torch.tensor([0.9]), 0)
    assert sorted(out[0].tolist()) == sorted((1.5 + 0.9 * atoms.reshape(-1)).tolist())
    out = tqc_targets(atoms, torch.tensor([1.5]), torch.tensor([0.0]), 1)
    assert out.tolist() == [[1.5, 1.5, 1.5]]


def test_targets_reject_non_finite_and_bad_drop():
    with pytest.raises(FloatingPointError):
        tqc_targets(torch.tensor([[1.0, float("nan")], [0.0, 0.0]]), 0.0, 1.0, 1)
    with pytest.raises(ValueError):
        tqc_targets(torch.zeros(2, 2), 0.0, 1.0, 4)


def test_targets_match_bruteforce_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        M = int(rng.integers(1, 30))
        d = int(rng.integers(0, 2 * M))
        atoms = rng.standard_normal((2, M)) * rng.uniform(0.1, 10)
        if rng.random() < 0.2:  # exercise ties
            atoms = np.round(atoms)
        R, g = float(rng.standard_normal()), float(rng.uniform(0, 1))
        ours = tqc_targets(torch.tensor(atoms), R, g, d).tolist()
        assert ours == tqc_targets_bruteforce(atoms, R, g, d)


def test_batched_targets_match_per_sample():
    rng = np.random.default_rng(1)
    atoms = torch.tensor(rng.standard_normal((16, 2, 25)))
    R = torch.tensor(rng.standard_normal(16))
    g = torch.tensor(rng.uniform(0, 1, 16))
    batch = tqc_targets(atoms, R, g, 5)
    assert batch.shape == (16, 45)
    for b in range(16):
        assert batch[b].tolist() == tqc_targets_bruteforce(atoms[b].numpy(), R[b].item(), g[b].item(), 5)


def test_truncation_mean_examples():
    atoms = torch.tensor([[-1.0, 0.0], [1.0, 2.0]])
    kept = tqc_targets(atoms, 0.0, 1.0, 1)
    assert truncation_mean(kept).item() == 0.0 < atoms.mean().item()
    assert truncation_mean(tqc_targets(atoms, 0.0, 1.0, 0)).item() == atoms.mean().item()
    flat = torch.full((2, 5), 0.7)
    for d in range(10):
        assert truncation_mean(tqc_targets(flat, 0.0, 1.0, d)).item() == pytest.approx(0.7, abs=1e-15)
    with pytest.raises(ValueError):
        truncation_mean(torch.tensor([]))


def test_truncation_mean_monotone_in_drop():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        M = int(rng.integers(1, 26))
        atoms = torch.tensor(rng.standard_normal((2, M)) * 3)
        means = [truncation_mean(tqc_targets(atoms, 0.0, 1.0, d)).item() for d in range(2 * M)]
        assert all(b <= a + 1e-12 for a, b in zip(means, means[1:]))


def test_huber_pieces():
    assert huber(torch.tensor(0.5)).item() == 0.125
    assert huber(torch.tensor(-2.0)).item() == 1.5
    assert huber(torch.tensor(1.0)).item() == 0.5


def test_loss_hand_values():
    q = torch.zeros(1, 1)
    assert quantile_huber_loss(q, torch.tensor([[0.0]])).item() == 0.0
    assert abs(quantile_huber_loss(q, torch.tensor([[0.5]])).item() - 0.0625) < 1e-12
    assert abs(quantile_huber_loss(q, torch.tensor([[-2.0]])).item() - 0.75) < 1e-12


def test_loss_matches_scalar_oracle_batch4_m2_d1():
    rng = np.random.default_rng(3)
    pred = rng.standard_normal((4, 2, 2)) * 2
    next_atoms = rng.standard_normal((4, 2, 2)) * 2
    R, g = rng.standard_normal(4), rng.uniform(0, 1, 4)
    targets = tqc_targets(torch.tensor(next_atoms), torch.tensor(R), torch.tensor(g), 1)
    expected = quantile_huber_scalar(pred.tolist(), [tqc_targets_bruteforce(next_atoms[b], R[b], g[b], 1) for b in range(4)])
    assert abs(quantile_huber_loss(torch.tensor(pred), targets).item() - expected) < 1e-10


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_non_negative_and_zero_only_at_coincidence(seed):
    rng = np.random.default_rng(seed)
    pred = torch.tensor(rng.standard_normal((3, 2, 4)))
    targets = torch.tensor(rng.standard_normal((3, 7)))
    assert quantile_huber_loss(pred, targets).item() > 0
    c = torch.tensor(rng.standard_normal((3, 1)))
    assert quantile_huber_loss(c[:, :, None].expand(3, 2, 4), c.expand(3, 7)).item() == 0.0


def test_loss_gradient_pushes_low_atom_up():
    q = torch.tensor([[[-5.0]]], requires_grad=True)
    quantile_huber_loss(q, torch.tensor([[1.0, 2.0, 3.0]])).backward()
    assert q.grad.item() < 0  # descent increases q


def test_loss_targets_are_detached():
    q = torch.zeros(2, 1, 3, requires_grad=True)
    y = torch.ones(2, 4, requires_grad=True)
    quantile_huber_loss(q, y).backward()
    assert y.grad is None


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        quantile_huber_loss(torch.zeros(2, 1, 3), torch.zeros(3, 4))


@pytest.mark.parametrize("tau", [0.5, 0.25, 0.9])
def test_quantile_regression_converges(tau):
    """One atom trained by SGD on N(200, 100^2) samples settles at the tau-quantile.

    The Huber kink shifts the minimiser by about (1 - 2 tau) / 2 in absolute
    units, so the sample scale is chosen large enough for that to be negligible.
    """
    rng = np.random.default_rng(4)
    q = torch.zeros(1, 1, 1, requires_grad=True)
    opt = torch.optim.Adam([q], lr=20.0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: max(0.02, 1 - k / 3000))
    taus = torch.tensor([tau])
    trace = []
    for step in range(6000):
        y = torch.tensor(rng.normal(200.0, 100.0, (1, 256)))
        opt.zero_grad()
        (quantile_huber_loss(q, y, taus) / 256).backward()
        opt.step()
        sched.step()
        if step >= 4000:
            trace.append(q.item())
    from statistics import NormalDist

    truth = 200.0 + 100.0 * NormalDist().inv_cdf(tau)
    assert abs(np.mean(trace) - truth) <= 0.02 * abs(truth)
