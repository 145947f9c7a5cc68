from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperfastrl.env import (
    MU_GRID,
    ActuatorBank,
    EnvConfig,
    EnvContractError,
    KSEnsemble,
    KSEnv,
    ReferenceTarget,
    control_field,
    forcing_field,
    l2_norm_sq,
    reward,
    write_trajectory,
)
from hyperfastrl.spectral import GridSpec

GRID = GridSpec()
CFG = EnvConfig()


def test_mu_grid():
    assert len(MU_GRID) == 19
    assert MU_GRID[0] == -0.225 and MU_GRID[-1] == 0.225
    assert 0.0 in MU_GRID


def test_forcing_field_examples():
    assert np.all(forcing_field(0.0, GRID) == 0)
    f = forcing_field(0.1, GRID)
    assert f[0] == pytest.approx(0.1, abs=1e-15)
    assert f[16] == pytest.approx(-0.1, abs=1e-15)  # x = L/4


def test_actuator_bank_examples():
    bank = ActuatorBank(GRID)
    assert bank.centers.shape == (8,)
    np.testing.assert_allclose(np.diff(bank.centers), 22 / 8)
    assert control_field(np.zeros(8), bank).tolist() == [0.0] * 64
    e1 = np.eye(8)[0]
    c1 = bank.centers[0]
    assert float((e1 @ bank.evaluate([c1]))[0]) == 1.0
    # distance 0.8 on either side, including across the periodic seam
    for x in (c1 + 0.8, c1 - 0.8, 22.0 - 0.8):
        assert float((e1 @ bank.evaluate([x]))[0]) == pytest.approx(math.exp(-1), abs=1e-15)
    G = bank.kernels
    assert np.all(G > 0) and np.all(G <= 1.0)
    assert np.all(np.argmax(G, axis=1) == np.round(bank.centers / GRID.dx).astype(int))


def test_control_field_clips_actions():
    bank = ActuatorBank(GRID)
    np.testing.assert_array_equal(control_field(np.full(8, 3.0), bank), control_field(np.ones(8), bank))


def test_reward_examples():
    assert reward(np.zeros(64), np.zeros(8), np.zeros(64), CFG) == 0.0
    assert abs(reward(np.ones(64), np.zeros(8), np.zeros(64), CFG) - (-(1 / 500) * (22 / 64) * 64)) < 1e-12
    assert abs(reward(np.ones(64), np.zeros(8), np.zeros(64), CFG) - (-0.044)) < 1e-12
    assert abs(reward(np.zeros(64), np.ones(8), np.zeros(64), CFG) - (-0.00055)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.01, 3.0))
def test_reward_nonpositive_and_monotone(seed, factor):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(64)
    u = rng.uniform(-1, 1, 8)
    r = reward(e, u, np.zeros(64), CFG)
    assert r <= 0
    assert reward(factor * e, u, np.zeros(64), CFG) < r
    assert reward(e, factor * u, np.zeros(64), CFG) < r


def test_reward_bound_for_bounded_fields():
    bound = -(1 / 500) * ((22 / 64) * 64 * 25 + 0.1 * (22 / 64) * 8)
    assert bound == pytest.approx(-1.1006, abs=1e-4)
    assert reward(np.full(64, 5.0), np.ones(8), np.zeros(64), CFG) == pytest.approx(bound, abs=1e-12)


def test_reference_profiles():
    assert np.all(ReferenceTarget("zero").profile(GRID) == 0)
    cos4 = ReferenceTarget("cos4").profile(GRID)
    assert abs(cos4.mean()) < 1e-14
    assert cos4[0] == pytest.approx(2.0)
    spectrum = np.abs(np.fft.rfft(cos4))
    assert set(np.flatnonzero(spectrum > 1e-9)) == {1, 2, 3, 4}
    off = ReferenceTarget("cos4-offset")
    assert off.profile(GRID).mean() == pytest.approx(0.5, abs=1e-14)
    assert off.zero_mode.mean == 0.5
    with pytest.raises(ValueError):
        ReferenceTarget("sine")


def test_config_validation_and_hash():
    with pytest.raises(ValueError):
        EnvConfig(max_steps=0)
    with pytest.raises(ValueError):
        EnvConfig(burn_in_steps=-1)
    assert EnvConfig().hash() == EnvConfig().hash()
    assert EnvConfig().hash() != EnvConfig(alpha=0.2).hash()
    assert CFG.control_dt == pytest.approx(0.2)


def test_initial_field_energy_and_mean():
    ens = KSEnsemble(CFG, 4, seed=3)
    for i in range(4):
        y0 = ens.initial_field(ens.slot_rng(i))
        assert abs(l2_norm_sq(y0, GRID) - 22.0) < 1e-10
        assert abs(y0.mean()) < 1e-12


def test_reset_determinism_and_mean():
    a = KSEnsemble(CFG, 3, seed=11).reset()
    b = KSEnsemble(CFG, 3, seed=11).reset()
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a[:, :64].mean(axis=1)) < 1e-10)
    c = KSEnsemble(CFG, 3, seed=12).reset()
    assert not np.array_equal(a, c)
    # slots are staggered: different initial fields across workers
    assert not np.array_equal(a[0, :64], a[1, :64])


def test_reset_pinned_mean_for_offset_case():
    cfg = EnvConfig(reference=ReferenceTarget("cos4-offset"))
    obs = KSEnsemble(cfg, 2, seed=0).reset()
    np.testing.assert_allclose(obs[:, :64].mean(axis=1), 0.5, atol=1e-10)


def test_round_robin_mu_assignment_and_observation():
    ens = KSEnsemble(CFG, 40, seed=0)
    assert ens.mus[0] == MU_GRID[0] and ens.mus[19] == MU_GRID[0] and ens.mus[20] == MU_GRID[1]
    obs = ens.reset([0, 1])
    assert obs.shape == (40, 65)
    assert obs[1, 64] == MU_GRID[1]


def test_step_reward_matches_definition():
    env = KSEnv(CFG, mu=0.075, seed=2)
    env.reset()
    u = np.linspace(-1, 1, 8)
    obs, r, done, info = env.step(u)
    assert r == reward(obs[:64], u, np.zeros(64), CFG)
    assert not done and obs[64] == 0.075


def test_horizon_termination():
    cfg = EnvConfig(max_steps=5)
    env = KSEnv(cfg, seed=0)
    env.reset()
    dones = [env.step(np.zeros(8))[2] for _ in range(5)]
    assert dones == [False] * 4 + [True]
    assert env.state().done
    with pytest.raises(EnvContractError):
        env.step(np.zeros(8))


def test_nan_injection_terminates_with_instability_flag():
    ens = KSEnsemble(CFG, 2, seed=0)
    ens.reset()
    ens.y_hat[1, 3] = np.nan
    obs, r, done, info = ens.step(np.zeros((2, 8)), auto_reset=False)
    assert done.tolist() == [False, True]
    assert info["instability"].tolist() == [False, True]
    assert info["terminated"][1] and not info["truncated"][1]


def test_action_shape_checked():
    ens = KSEnsemble(CFG, 2, seed=0)
    ens.reset()
    with pytest.raises(ValueError):
        ens.step(np.zeros((2, 7)))


def test_batch_of_one_matches_scalar_bitwise():
    env = KSEnv(CFG, mu=0.15, seed=5, slot=3)
    ens = KSEnsemble(CFG, 4, seed=5, mus=[0.0, 0.0, 0.0, 0.15])
    np.testing.assert_array_equal(env.reset(), ens.reset()[3])
    rng = np.random.default_rng(0)
    for _ in range(20):
        u = rng.uniform(-1, 1, (4, 8))
        o1, r1, _, _ = env.step(u[3])
        o4, r4, _, _ = ens.step(u)
        np.testing.assert_array_equal(o1, o4[3])
        assert r1 == r4[3]


def test_identical_members_give_identical_results():
    ens = KSEnsemble(CFG, 8, seed=0, mus=[0.1] * 8)
    ens.reset()
    ens.y_hat[:] = ens.y_hat[0]
    obs, r, _, _ = ens.step(np.tile(np.linspace(-1, 1, 8), (8, 1)))
    assert np.all(obs == obs[0]) and np.all(r == r[0])


def test_auto_reset_preserves_mu_and_returns_final_obs():
    cfg = EnvConfig(max_steps=3, mu_grid=(-0.1, 0.2))
    ens = KSEnsemble(cfg, 4, seed=0)
    ens.reset()
    for _ in range(3):
        obs, r, done, info = ens.step(np.zeros((4, 8)))
    assert done.all()
    np.testing.assert_array_equal(obs[:, 64], [-0.1, 0.2, -0.1, 0.2])
    np.testing.assert_array_equal(info["final_obs"][:, 64], [-0.1, 0.2, -0.1, 0.2])
    assert not np.array_equal(obs[:, :64], info["final_obs"][:, :64])
    assert (ens.step_count == 0).all() and not ens.done.any()


def test_uncontrolled_dynamics_stay_chaotic():
    """Zero control at mu=0: energy never collapses below 10% of its initial value."""
    for seed in range(10):
        env = KSEnv(CFG, mu=0.0, seed=seed)
        y = env.reset()[:64]
        e0 = l2_norm_sq(y, GRID)
        e_min = min(l2_norm_sq(env.step(np.zeros(8))[0][:64], GRID) for _ in range(250))
        assert e_min > 0.1 * e0


def test_write_trajectory(tmp_path):
    fields = np.arange(12.0).reshape(3, 4)
    write_trajectory(tmp_path / "traj.csv", fields, 0.2, {"mu": 0.1, "case": "zero", "seed": 1, "config_hash": "abc"})
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert lines[0] == "t,x_0,x_1,x_2,x_3"
    assert [float(v) for v in lines[2].split(",")] == [0.2, 4, 5, 6, 7]
    assert json.loads((tmp_path / "traj.json").read_text())["seed"] == 1
