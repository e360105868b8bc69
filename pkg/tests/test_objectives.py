import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import central_difference, relative_error
from uunet.objectives import (
    EPS,
    RAW_TERMS,
    LossWeights,
    adversarial_terms,
    discriminator_loss,
    discriminator_loss_terms,
    generator_adversarial_loss,
    generator_adversarial_term,
    mean_breakdown,
    reconstruction_loss,
    total_losses,
)
from uunet.topology import DiscriminatorOutput


def t(x):
    return torch.as_tensor(x, dtype=torch.float64)


def test_discriminator_loss_at_half():
    assert discriminator_loss(t([0.5]), t([0.5])).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_discriminator_loss_perfect():
    assert discriminator_loss(t([1.0]), t([0.0])).item() < 1e-6


def test_discriminator_loss_clamped_finite():
    v = discriminator_loss(t([0.0]), t([1.0])).item()
    assert math.isfinite(v)
    assert v == pytest.approx(-2 * math.log(EPS), rel=1e-6)


def test_generator_loss_values():
    assert generator_adversarial_loss(t([0.5])).item() == pytest.approx(math.log(2), abs=1e-12)
    assert generator_adversarial_loss(t([1.0 - 1e-9])).item() < 1e-6
    scores = [0.1, 0.4, 0.9]
    assert generator_adversarial_loss(t(scores)).item() == pytest.approx(np.mean([-math.log(s) for s in scores]))


def test_adversarial_losses_match_numpy_oracle(rng):
    for _ in range(25):
        real = rng.uniform(0.01, 0.99, rng.integers(1, 9))
        fake = rng.uniform(0.01, 0.99, len(real))
        r, f = discriminator_loss_terms(t(real), t(fake))
        assert r.item() == pytest.approx(float(np.mean(-np.log(real))), abs=1e-6)
        assert f.item() == pytest.approx(float(np.mean(-np.log(1 - fake))), abs=1e-6)
        assert generator_adversarial_loss(t(fake)).item() == pytest.approx(float(np.mean(-np.log(fake))), abs=1e-6)


def test_logit_form_equals_score_form(rng):
    for _ in range(20):
        lr_, lf = t(rng.normal(0, 3, 5)), t(rng.normal(0, 3, 5))
        real = DiscriminatorOutput(torch.sigmoid(lr_), logit=lr_)
        fake = DiscriminatorOutput(torch.sigmoid(lf), logit=lf)
        a, b = adversarial_terms(real, fake)
        c, d = discriminator_loss_terms(real.score, fake.score)
        assert a.item() == pytest.approx(c.item(), abs=1e-6)
        assert b.item() == pytest.approx(d.item(), abs=1e-6)
        assert generator_adversarial_term(fake).item() == pytest.approx(
            generator_adversarial_loss(fake.score).item(), abs=1e-6
        )


def test_logit_form_keeps_gradient_when_saturated():
    logit = t([-30.0]).requires_grad_()
    real = DiscriminatorOutput(torch.sigmoid(logit), logit=logit)
    d_real, _ = adversarial_terms(real, real)
    d_real.backward()
    assert logit.grad.item() < -0.99  # score form would give 0 under the clamp


def test_score_fallback_without_logits():
    real, fake = DiscriminatorOutput(t([0.5])), DiscriminatorOutput(t([0.5]))
    r, f = adversarial_terms(real, fake)
    assert (r + f).item() == pytest.approx(2 * math.log(2))


def test_reconstruction_examples():
    assert reconstruction_loss(t([[[[0.0]]]]), t([[[[2.0]]]])).item() == 2.0
    x = t(np.random.default_rng(0).normal(size=(3, 2, 4, 4)))
    assert reconstruction_loss(x, x).item() == 0.0


def test_reconstruction_matches_numpy_oracle(rng):
    for _ in range(25):
        shape = (int(rng.integers(1, 4)), 3, 4, 4)
        x, y = rng.normal(size=shape), rng.normal(size=shape)
        ref = float(np.mean(0.5 * np.sum((y - x).reshape(shape[0], -1) ** 2, axis=1)))
        assert reconstruction_loss(t(x), t(y)).item() == pytest.approx(ref, abs=1e-6)


def test_reconstruction_permutation_invariant(rng):
    x, y = t(rng.normal(size=(5, 1, 2, 2))), t(rng.normal(size=(5, 1, 2, 2)))
    perm = torch.tensor([3, 0, 4, 1, 2])
    assert reconstruction_loss(x, y).item() == pytest.approx(reconstruction_loss(x[perm], y[perm]).item(), abs=1e-12)


def test_reconstruction_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        reconstruction_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


PARTS = dict(d_loss_real=0.3, d_loss_fake=0.4, g_adv=0.9, l_re=2.0, l_gkl=1.5, l_dkl=0.7, l_ckl=0.2)


def test_all_lambda_zero_gives_pure_gan():
    w = LossWeights(lambda_re=0, lambda_gkl=0, lambda_dis=0, lambda_ckl=0)
    b = total_losses(PARTS, w)
    assert b.total_g == pytest.approx(0.9)
    assert b.total_d == pytest.approx(0.7)


def test_perfect_reconstruction_total_is_adversarial():
    w = LossWeights(lambda_re=1, lambda_gkl=0, lambda_dis=0, lambda_ckl=0)
    assert total_losses({**PARTS, "l_re": 0.0}, w).total_g == pytest.approx(0.9)


def test_ckl_side_routing():
    base = dict(lambda_re=0, lambda_gkl=0, lambda_dis=0, lambda_ckl=1.0)
    g = total_losses(PARTS, LossWeights(**base, ckl_side="g"))
    d = total_losses(PARTS, LossWeights(**base, ckl_side="d"))
    both = total_losses(PARTS, LossWeights(**base, ckl_side="both"))
    assert (g.total_g, g.total_d) == pytest.approx((1.1, 0.7))
    assert (d.total_g, d.total_d) == pytest.approx((0.9, 0.9))
    assert (both.total_g, both.total_d) == pytest.approx((1.1, 0.9))


def test_lambda_scale_mode():
    w = LossWeights(lambda_dis=0.01, alpha=0.4, beta=0.6, dis_kl_mode="lambda_scale")
    assert w.dis_kl_weights() == pytest.approx((0.004, 1.0, 1.0))


@settings(max_examples=40, deadline=None)
@given(
    raw=st.lists(st.floats(0, 10), min_size=len(RAW_TERMS), max_size=len(RAW_TERMS)),
    lam=st.sampled_from(["lambda_re", "lambda_gkl", "lambda_dis", "lambda_ckl"]),
    value=st.floats(0, 5),
)
def test_totals_affine_in_each_lambda(raw, lam, value):
    parts = dict(zip(RAW_TERMS, raw))
    slope_term = {"lambda_re": "l_re", "lambda_gkl": "l_gkl", "lambda_dis": "l_dkl", "lambda_ckl": "l_ckl"}[lam]
    b0 = total_losses(parts, LossWeights(**{lam: 0.0}))
    b1 = total_losses(parts, LossWeights(**{lam: value}))
    diff = (b1.total_g - b0.total_g) + (b1.total_d - b0.total_d)
    expected = value * parts[slope_term] * (2 if lam == "lambda_ckl" else 1)
    assert diff == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_doubling_ckl_doubles_contribution():
    w1 = LossWeights(lambda_ckl=0.5)
    w2 = LossWeights(lambda_ckl=1.0)
    z = LossWeights(lambda_ckl=0.0)
    c1 = total_losses(PARTS, w1).total_g - total_losses(PARTS, z).total_g
    c2 = total_losses(PARTS, w2).total_g - total_losses(PARTS, z).total_g
    assert c2 == pytest.approx(2 * c1)


def test_unknown_term_rejected():
    with pytest.raises(KeyError):
        total_losses({"l_foo": 1.0}, LossWeights())


def test_mean_breakdown_recombines_means():
    w = LossWeights()
    a, b = total_losses(PARTS, w), total_losses({k: 2 * v for k, v in PARTS.items()}, w)
    m = mean_breakdown([a, b], w)
    assert m.l_re == pytest.approx(3.0)
    assert m.total_g == pytest.approx((a.total_g + b.total_g) / 2)


@pytest.mark.parametrize("kw", [dict(lambda_re=-1), dict(alpha=0, beta=0), dict(ckl_side="x"), dict(dis_kl_mode="y")])
def test_weight_validation(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)


def _check_grad(fn, x, seed):
    x = x.clone().requires_grad_()
    (g,) = torch.autograd.grad(fn(x), x)
    gen = np.random.default_rng(seed)
    for _ in range(20):
        idx = tuple(int(gen.integers(s)) for s in x.shape)
        fd = central_difference(lambda v: fn(v).item(), x.detach(), idx)
        assert relative_error(g[idx].item(), fd) < 1e-3


def test_adversarial_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(0)
    scores = torch.rand(24, dtype=torch.float64, generator=gen) * 0.9 + 0.05
    other = torch.rand(24, dtype=torch.float64, generator=gen) * 0.9 + 0.05
    _check_grad(lambda s: discriminator_loss(s, other), scores, 1)
    _check_grad(lambda s: discriminator_loss(other, s), scores, 2)
    _check_grad(generator_adversarial_loss, scores, 3)
    logits = torch.randn(24, dtype=torch.float64, generator=gen) * 2
    _check_grad(lambda l: generator_adversarial_term(DiscriminatorOutput(torch.sigmoid(l), logit=l)), logits, 4)
    _check_grad(
        lambda l: sum(adversarial_terms(DiscriminatorOutput(torch.sigmoid(l), logit=l),
                                        DiscriminatorOutput(torch.sigmoid(-l), logit=-l))),
        logits, 5,
    )


def test_reconstruction_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64, generator=gen)
    y = torch.randn(2, 3, 4, 4, dtype=torch.float64, generator=gen)
    _check_grad(lambda v: reconstruction_loss(x, v), y, 6)
