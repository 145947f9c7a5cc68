from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from hyperfastrl.autodiff import SNLinear
from hyperfastrl.hypernet import (
    ENCODERS,
    MU_SCALE,
    ActNetLayer,
    FourierFeatures,
    GeneratedWeights,
    HyperActorCritic,
    HyperNetwork,
    HypernetConfig,
    basis_moments,
    count_parameters,
    fourier_embed,
    full_scale_census,
    generate_weights,
    generated_forward,
    scale_mu,
)

from oracles import gaussian_sine_moments_mc, gaussian_sine_moments_quadrature

torch.set_default_dtype(torch.float64)

REFERENCE_COUNTS = {"mlp": 90_011_252, "fourier": 90_405_239, "kan": 95_975_322}


def tiny(encoder="mlp", **kw) -> HypernetConfig:
    base = dict(encoder=encoder, widths=(8, 16, 16), obs_dim=8, act_dim=2, hidden=8, n_quantiles=5, mapping_size=16, n_basis=4)
    base.update(kw)
    return HypernetConfig(**base)


def test_mu_scaling():
    assert MU_SCALE == 0.0225
    assert scale_mu(0.225) == pytest.approx(10.0)
    assert scale_mu(-0.225) == pytest.approx(-10.0)


def test_fourier_embed_examples():
    ff = FourierFeatures(256, 1.0)
    out = fourier_embed(torch.tensor([0.0]), ff)[0]
    assert out.shape == (513,)
    assert torch.equal(out[:257], torch.zeros(257))
    assert torch.equal(out[257:], torch.ones(256))
    out = fourier_embed(torch.tensor([3.7, -1.2]), ff)
    assert out[:, 0].tolist() == [3.7, -1.2]
    assert (out[:, 1:257] ** 2 + out[:, 257:] ** 2 - 1).abs().max() < 1e-12


def test_fourier_buffers_are_frozen():
    cfg = tiny("fourier")
    net = HyperNetwork(cfg, cfg.actor_layers)
    ff = net.encoder[0]
    assert not ff.B.requires_grad and not ff.sigma.requires_grad
    assert ff.B.shape == (16,)


def test_basis_moments_degenerate_cases():
    m, v = basis_moments(torch.tensor(0.0), torch.tensor(math.pi / 2))
    assert m.item() == 1.0 and v.item() == 0.0
    m, v = basis_moments(torch.tensor(0.0), torch.tensor(0.0))
    assert m.item() == 0.0 and v.item() == 0.0


def test_basis_moments_match_quadrature():
    rng = np.random.default_rng(1)
    for w, p in [(1.0, 0.3), (0.0, 1.0), (4.0, -2.0)] + [(rng.uniform(0, 3), rng.uniform(-math.pi, math.pi)) for _ in range(30)]:
        qm, qv = gaussian_sine_moments_quadrature(w, p)
        cm, cv = basis_moments(torch.tensor(w), torch.tensor(p))
        assert abs(cm.item() - qm) < 1e-12 and abs(cv.item() - qv) < 1e-12


def test_basis_moments_match_monte_carlo():
    rng = np.random.default_rng(0)
    pairs = [(1.0, 0.3)] + [(rng.uniform(0.1, 3.0), rng.uniform(-math.pi, math.pi)) for _ in range(19)]
    for w, p in pairs:
        mean, var, se_m, se_v = gaussian_sine_moments_mc(w, p, 1_000_000, rng)
        cm, cv = basis_moments(torch.tensor(w), torch.tensor(p))
        assert abs(cm.item() - mean) < 3 * se_m, (w, p)
        assert abs(cv.item() - var) < 3 * se_v, (w, p)


def test_constant_basis_is_removed_by_normalisation():
    layer = ActNetLayer(3, 2, n_basis=2)
    with torch.no_grad():
        layer.omega.zero_()
        layer.phase.copy_(torch.tensor([math.pi / 2, 0.0]))
    psi = layer.normalized_basis(torch.randn(5, 3))
    assert torch.all(torch.isfinite(psi))
    assert psi.abs().max() < 1e-12


def test_actnet_normalised_basis_is_standardised():
    layer = ActNetLayer(1, 1, n_basis=6)
    psi = layer.normalized_basis(torch.randn(200_000, 1))[:, :, 0]
    assert psi.mean(0).abs().max() < 0.02
    assert (psi.var(0) - 1).abs().max() < 0.03


@pytest.mark.parametrize("encoder", ENCODERS)
def test_dedup_equals_naive(encoder):
    torch.manual_seed(0)
    cfg = tiny(encoder)
    net = HyperNetwork(cfg, cfg.critic_layers).eval()
    with torch.no_grad():
        for p in net.parameters():
            if p.requires_grad:
                p.add_(0.1 * torch.randn_like(p))
    mu = torch.tensor([1.0, -2.0, 1.0, 0.5, -2.0, 1.0])
    gw = generate_weights(mu, net)
    assert gw.n_evaluations == 3
    dedup = gw.gather()
    naive = [net(m.reshape(1)) for m in mu]
    for layer, (W, b, s) in enumerate(dedup):
        for i in range(len(mu)):
            nW, nb, ns = naive[i][layer]
            assert (W[i] - nW[0]).abs().max() < 1e-12
            assert (b[i] - nb[0]).abs().max() < 1e-12
            assert (s[i] - ns[0]).abs().max() < 1e-12
    # generated forward on the grouped path equals per-sample forwards
    x = torch.randn(6, cfg.obs_dim + cfg.act_dim)
    grouped = generated_forward(x, gw, "critic")
    single = torch.cat([generated_forward(x[i : i + 1], generate_weights(mu[i : i + 1], net), "critic") for i in range(6)])
    assert (grouped - single).abs().max() < 1e-12


def test_encoder_evaluation_counts():
    cfg = tiny()
    net = HyperNetwork(cfg, cfg.actor_layers)
    net.encoder_evaluations = 0
    generate_weights(torch.tensor([0.3, 0.3, 0.3]), net)
    assert net.encoder_evaluations == 1
    net.encoder_evaluations = 0
    gw = generate_weights(torch.tensor([0.3, 0.7, 0.3, 0.7]), net)
    assert net.encoder_evaluations == 2
    assert gw.index.tolist() == [0, 1, 0, 1]
    with pytest.raises(ValueError):
        generate_weights(torch.tensor([]), net)


@pytest.mark.parametrize("encoder", ENCODERS)
def test_scales_are_one_at_init_and_shapes_match(encoder):
    cfg = tiny(encoder)
    net = HyperNetwork(cfg, cfg.actor_layers)
    layers = net(torch.tensor([-3.0, 0.0, 4.0]))
    for (d_in, d_out), (W, b, s) in zip(cfg.actor_layers, layers):
        assert W.shape == (3, d_out, d_in) and b.shape == (3, d_out)
        assert torch.equal(s, torch.ones(3, d_out))


def test_generated_forward_examples():
    idx = torch.zeros(4, dtype=torch.long)
    zeros = GeneratedWeights([(torch.zeros(1, 5, 3), torch.zeros(1, 5), torch.ones(1, 5)), (torch.zeros(1, 2, 5), torch.zeros(1, 2), torch.ones(1, 2))], idx)
    assert torch.equal(generated_forward(torch.randn(4, 3), zeros, "actor"), torch.zeros(4, 2))
    big = GeneratedWeights([(100 * torch.randn(1, 5, 3), torch.randn(1, 5), torch.ones(1, 5)), (100 * torch.randn(1, 2, 5), torch.zeros(1, 2), torch.ones(1, 2))], idx)
    a = generated_forward(1e3 * torch.randn(4, 3), big, "actor")
    assert torch.all(a.abs() < 1)
    # the per-neuron scale gates W h before the bias
    W, x = torch.randn(1, 5, 3), torch.randn(4, 3)
    one = GeneratedWeights([(W, torch.zeros(1, 5), torch.ones(1, 5))], idx)
    two = GeneratedWeights([(W, torch.zeros(1, 5), 2 * torch.ones(1, 5))], idx)
    torch.testing.assert_close(generated_forward(x, two, "critic"), 2 * generated_forward(x, one, "critic"), rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        generated_forward(torch.randn(4, 4), one, "critic")
    with pytest.raises(ValueError):
        generated_forward(x, one, "value")


def test_actor_critic_shapes():
    cfg = tiny()
    model = HyperActorCritic(cfg)
    y, a, mu = torch.randn(7, 8), torch.rand(7, 2) * 2 - 1, torch.tensor([0.0, 1.0] * 3 + [2.0])
    assert model.act(y, mu).shape == (7, 2)
    assert model.quantiles(y, a, mu).shape == (7, 2, 5)
    assert model.quantiles(y, a, mu, critics=[1]).shape == (7, 1, 5)


@pytest.mark.parametrize("encoder", ENCODERS)
def test_weights_continuous_in_mu(encoder):
    torch.manual_seed(1)
    cfg = tiny(encoder)
    net = HyperNetwork(cfg, cfg.actor_layers).eval()
    with torch.no_grad():
        for p in net.parameters():
            if p.requires_grad:
                p.add_(0.2 * torch.randn_like(p))

    def flat(m):
        return torch.cat([t.reshape(-1) for layer in net(torch.tensor([m])) for t in layer])

    base = flat(1.3)
    ratios = [((flat(1.3 + d) - base).norm() / d).item() for d in (1e-3, 1e-4, 1e-5)]
    assert all(np.isfinite(ratios))
    assert max(ratios) / min(ratios) < 1.5


def test_backbone_spectral_norm_after_warmup():
    cfg = tiny()
    net = HyperNetwork(cfg, cfg.actor_layers)
    with torch.no_grad():
        for m in net.encoder.modules():
            if isinstance(m, SNLinear):
                m.weight.mul_(5.0)
    for _ in range(60):
        net(torch.linspace(-10, 10, 5))
    for m in net.encoder.modules():
        if isinstance(m, SNLinear) and not m.clamp:
            assert torch.linalg.svdvals(m.normalized_weight())[0].item() <= 1 + 1e-2


def _hand_count(cfg: HypernetConfig, layers) -> int:
    """Closed-form count for the MLP encoder plus affine heads."""
    total, d = 0, 1
    for w in cfg.widths:
        total += d * w + w  # projection
        total += cfg.blocks_per_stage * 2 * (w * w + w)  # residual blocks
        total += 2 * w  # LayerNorm affine
        d = w
    for d_in, d_out in layers:
        for n in (d_in * d_out, d_out, d_out):  # W, b, s heads
            total += d * n + n
    return total


def test_toy_parameter_count_matches_hand_sum():
    cfg = HypernetConfig(widths=(4, 4, 4), obs_dim=8, act_dim=2, hidden=8, n_quantiles=3)
    net = HyperNetwork(cfg, cfg.actor_layers)
    trainable, frozen, total = count_parameters(net)
    assert frozen == 0
    assert trainable == total == _hand_count(cfg, cfg.actor_layers)
    model = HyperActorCritic(cfg)
    expected = _hand_count(cfg, cfg.actor_layers) + 2 * _hand_count(cfg, cfg.critic_layers)
    assert count_parameters(model)[2] == expected


@pytest.mark.parametrize("encoder", ENCODERS)
def test_full_scale_census_within_two_percent(encoder):
    trainable, frozen, total = full_scale_census(encoder)
    assert abs(total - REFERENCE_COUNTS[encoder]) / REFERENCE_COUNTS[encoder] < 0.02
    if encoder == "mlp":
        assert trainable == total == 90_011_252
    if encoder == "fourier":
        assert frozen == 771
