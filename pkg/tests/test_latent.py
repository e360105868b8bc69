import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.distributions import Normal, kl_divergence

from conftest import central_difference, relative_error
from uunet.latent import (
    GaussianLatent,
    LatentHead,
    broadcast_latent,
    cross_kl,
    kl_to_standard_normal,
    reparameterize,
    weighted_discriminator_kl,
)


def q(mu, log_var, dtype=torch.float64):
    return GaussianLatent(torch.as_tensor(mu, dtype=dtype), torch.as_tensor(log_var, dtype=dtype))


def oracle_kl_std(mu, log_var):
    """Closed form in numpy, summed over dims and averaged over batch."""
    mu, log_var = np.atleast_2d(mu), np.atleast_2d(log_var)
    return float(np.mean(np.sum(0.5 * (mu ** 2 + np.exp(log_var) - 1.0 - log_var), axis=-1)))


def test_kl_zero_at_prior():
    assert kl_to_standard_normal(q([0.0, 0.0], [0.0, 0.0])).item() == 0.0


def test_kl_unit_mean_shift():
    assert kl_to_standard_normal(q([1.0], [0.0])).item() == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_torch_distributions_on_random_cases(rng):
    for _ in range(25):
        n, m = rng.integers(1, 5), rng.integers(1, 9)
        mu = rng.normal(0, 2, (n, m))
        lv = rng.uniform(-4, 4, (n, m))
        ref = kl_divergence(
            Normal(torch.tensor(mu), torch.tensor(np.exp(0.5 * lv))), Normal(torch.zeros(n, m, dtype=torch.float64), 1.0)
        ).sum(-1).mean().item()
        got = kl_to_standard_normal(q(mu, lv)).item()
        assert got == pytest.approx(ref, abs=1e-6)
        assert got == pytest.approx(oracle_kl_std(mu, lv), abs=1e-6)


def test_kl_matches_monte_carlo():
    mu = np.array([0.7, -1.2, 0.1])
    lv = np.array([0.5, -0.8, 1.1])
    sd = np.exp(0.5 * lv)
    z = np.random.default_rng(0).normal(mu, sd, (10 ** 6, 3))
    log_q = -0.5 * (((z - mu) / sd) ** 2 + np.log(2 * np.pi) + lv)
    log_p = -0.5 * (z ** 2 + np.log(2 * np.pi))
    mc = float(np.mean(np.sum(log_q - log_p, axis=1)))
    got = kl_to_standard_normal(q(mu, lv)).item()
    assert abs(got - mc) / got < 0.01


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-10, 10)), min_size=1, max_size=6))
def test_kl_non_negative(pairs):
    mu, lv = zip(*pairs)
    assert kl_to_standard_normal(q(list(mu), list(lv))).item() >= -1e-12


def test_log_var_clamped():
    g = q([0.0], [-40.0])
    assert g.log_var.item() == -20.0
    assert q([0.0], [50.0]).log_var.item() == 20.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="differ"):
        GaussianLatent(torch.zeros(2, 3), torch.zeros(2, 4))


def test_reparameterize_sigma_to_zero():
    s = reparameterize(q([0.0] * 5, [-40.0] * 5), rng=3)
    assert s.z.abs().max().item() < 1e-4


def test_reparameterize_deterministic_for_seed():
    g = q([0.3, -0.2], [0.1, 0.4])
    assert torch.equal(reparameterize(g, 11).z, reparameterize(g, 11).z)
    gen_a, gen_b = torch.Generator().manual_seed(4), torch.Generator().manual_seed(4)
    assert torch.equal(reparameterize(g, gen_a).z, reparameterize(g, gen_b).z)


def test_reparameterize_sample_mean():
    n = 10 ** 5
    mu = torch.full((n, 1), 1.5, dtype=torch.float64)
    lv = torch.full((n, 1), math.log(4.0), dtype=torch.float64)
    z = reparameterize(GaussianLatent(mu, lv), 0).z
    assert abs(z.mean().item() - 1.5) < 3 * 2.0 / math.sqrt(n)
    assert z.std().item() == pytest.approx(2.0, rel=0.02)


def test_reparameterize_is_differentiable():
    mu = torch.tensor([[0.5]], requires_grad=True)
    lv = torch.tensor([[0.2]], requires_grad=True)
    s = reparameterize(GaussianLatent(mu, lv), 1)
    s.z.sum().backward()
    assert mu.grad.item() == 1.0
    assert lv.grad.item() == pytest.approx(0.5 * math.exp(0.1) * s.eps.item())


def test_cross_kl_identical_is_zero():
    g = q([0.3, -1.0], [0.5, -0.5])
    assert cross_kl(g, g).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_kl_unit_shift():
    assert cross_kl(q([0.0], [0.0]), q([1.0], [0.0])).item() == pytest.approx(0.5, abs=1e-12)


def test_cross_kl_asymmetry_frozen_values():
    a = q([0.0], [0.0])
    b = q([0.0], [math.log(4.0)])  # sigma 2
    # KL(N(0,4) || N(0,1)) = 2 - 1/2 - log 2 ; KL(N(0,1) || N(0,4)) = log 2 + 1/8 - 1/2
    assert cross_kl(a, b).item() == pytest.approx(1.5 - math.log(2), abs=1e-9)
    assert cross_kl(b, a).item() == pytest.approx(math.log(2) - 0.375, abs=1e-9)
    assert cross_kl(a, b).item() == pytest.approx(0.806853, abs=1e-6)
    assert cross_kl(b, a).item() == pytest.approx(0.318147, abs=1e-6)


def test_cross_kl_matches_torch_distributions(rng):
    for _ in range(25):
        mg, md = rng.normal(0, 1, (2, 3, 4))
        lg, ld = rng.uniform(-3, 3, (2, 3, 4))
        ref = kl_divergence(
            Normal(torch.tensor(md), torch.tensor(np.exp(0.5 * ld))), Normal(torch.tensor(mg), torch.tensor(np.exp(0.5 * lg)))
        ).sum(-1).mean().item()
        assert cross_kl(q(mg, lg), q(md, ld)).item() == pytest.approx(ref, abs=1e-6)


def test_cross_kl_shape_mismatch():
    with pytest.raises(ValueError, match="latent shapes"):
        cross_kl(q([0.0], [0.0]), q([0.0, 0.0], [0.0, 0.0]))


def test_weighted_kl_cases():
    assert weighted_discriminator_kl(2.0, 4.0, 1.0, 1.0) == 3.0
    assert weighted_discriminator_kl(2.0, 4.0, 1.0, 0.0) == 2.0
    assert weighted_discriminator_kl(2.0, 4.0, 0.65, 0.35) == pytest.approx(0.65 * 2 + 0.35 * 4)
    with pytest.raises(ValueError):
        weighted_discriminator_kl(1.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        weighted_discriminator_kl(1.0, 1.0, -0.1, 1.0)


def _fd_check(loss_fn, tensors, n_points=20, seed=0):
    grads = torch.autograd.grad(loss_fn(*tensors), tensors)
    gen = np.random.default_rng(seed)
    for _ in range(n_points):
        which = int(gen.integers(len(tensors)))
        idx = tuple(int(gen.integers(s)) for s in tensors[which].shape)

        def f(t, which=which):
            args = list(tensors)
            args[which] = t
            return loss_fn(*args).item()

        fd = central_difference(f, tensors[which], idx)
        assert relative_error(grads[which][idx].item(), fd) < 1e-3


def test_kl_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    mu = torch.randn(3, 4, dtype=torch.float64, generator=g).requires_grad_()
    lv = torch.randn(3, 4, dtype=torch.float64, generator=g).requires_grad_()
    _fd_check(lambda m, l: kl_to_standard_normal(GaussianLatent(m, l)), [mu, lv])


def test_cross_kl_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(1)
    ts = [torch.randn(2, 3, dtype=torch.float64, generator=g).requires_grad_() for _ in range(4)]
    _fd_check(lambda a, b, c, d: cross_kl(GaussianLatent(a, b), GaussianLatent(c, d)), ts)


def test_latent_head_and_broadcast():
    head = LatentHead(8, 5)
    out = head(torch.randn(2, 8, 4, 4))
    assert out.mu.shape == (2, 5) and out.log_var.shape == (2, 5)
    tiled = broadcast_latent(out.mu, 4, 4)
    assert tiled.shape == (2, 5, 4, 4)
    assert torch.equal(tiled[:, :, 3, 1], out.mu)
    with pytest.raises(ValueError):
        LatentHead(8, 0)
