"""Adversarial and reconstruction losses, and their weighted combination.

The combination helpers are written against plain arithmetic so the same
code serves the trainer (tensors, for backprop) and the recorded
:class:`LossBreakdown` (Python floats).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import torch
import torch.nn.functional as F

EPS = 1e-7
CKL_SIDES = ("g", "d", "both")
DIS_KL_MODES = ("weights", "lambda_scale")


@dataclass(frozen=True)
class LossWeights:
    lambda_re: float = 100.0
    lambda_gkl: float = 0.01
    lambda_dis: float = 0.01
    lambda_ckl: float = 0.01
    alpha: float = 1.0
    beta: float = 1.0
    ckl_side: str = "both"
    dis_kl_mode: str = "weights"

    def __post_init__(self):
        for name in ("lambda_re", "lambda_gkl", "lambda_dis", "lambda_ckl", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.alpha + self.beta == 0:
            raise ValueError("alpha + beta must be > 0")
        if self.ckl_side not in CKL_SIDES:
            raise ValueError(f"ckl_side must be one of {CKL_SIDES}, got {self.ckl_side!r}")
        if self.dis_kl_mode not in DIS_KL_MODES:
            raise ValueError(f"dis_kl_mode must be one of {DIS_KL_MODES}, got {self.dis_kl_mode!r}")

    @property
    def ckl_on_g(self) -> bool:
        return self.ckl_side in ("g", "both")

    @property
    def ckl_on_d(self) -> bool:
        return self.ckl_side in ("d", "both")

    def dis_kl_weights(self):
        """Effective ``(lambda_dis, alpha, beta)``.

        In ``lambda_scale`` mode ``alpha`` is read as a multiplier on
        ``lambda_dis`` and real/fake are weighted equally.
        """
        if self.dis_kl_mode == "lambda_scale":
            return self.lambda_dis * self.alpha, 1.0, 1.0
        return self.lambda_dis, self.alpha, self.beta


@dataclass(frozen=True)
class LossBreakdown:
    d_loss_real: float = 0.0
    d_loss_fake: float = 0.0
    g_adv: float = 0.0
    l_re: float = 0.0
    l_gkl: float = 0.0
    l_dkl: float = 0.0
    l_ckl: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def as_dict(self):
        return asdict(self)


RAW_TERMS = ("d_loss_real", "d_loss_fake", "g_adv", "l_re", "l_gkl", "l_dkl", "l_ckl")


def _clamp(score):
    return score.clamp(EPS, 1.0 - EPS)


def discriminator_loss_terms(d_real: torch.Tensor, d_fake: torch.Tensor):
    """``(-mean log D(real), -mean log(1 - D(fake)))``."""
    return -torch.log(_clamp(d_real)).mean(), -torch.log1p(-_clamp(d_fake)).mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    real, fake = discriminator_loss_terms(d_real, d_fake)
    return real + fake


def generator_adversarial_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss ``-mean log D(G(x))``."""
    return -torch.log(_clamp(d_fake)).mean()


def adversarial_terms(real_out, fake_out):
    """D real/fake terms and the generator term from discriminator outputs.

    Uses the pre-sigmoid logits when available (``-log sigmoid(l) =
    softplus(-l)``), which keeps gradients alive once the discriminator
    saturates; otherwise falls back to the clamped score form.
    """
    if real_out is not None and real_out.logit is not None and fake_out.logit is not None:
        return F.softplus(-real_out.logit).mean(), F.softplus(fake_out.logit).mean()
    return discriminator_loss_terms(real_out.score, fake_out.score)


def generator_adversarial_term(fake_out):
    if fake_out.logit is not None:
        return F.softplus(-fake_out.logit).mean()
    return generator_adversarial_loss(fake_out.score)


def reconstruction_loss(x: torch.Tensor, x_r: torch.Tensor) -> torch.Tensor:
    """Half the per-sample sum of squared errors, averaged over the batch."""
    if x.shape != x_r.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_r.shape)}")
    diff = (x_r - x).reshape(x.shape[0], -1)
    return 0.5 * diff.pow(2).sum(dim=1).mean()


def generator_total(g_adv, l_re, l_gkl, l_ckl, w: LossWeights):
    total = g_adv + w.lambda_re * l_re + w.lambda_gkl * l_gkl
    if w.ckl_on_g:
        total = total + w.lambda_ckl * l_ckl
    return total


def discriminator_total(d_loss_real, d_loss_fake, l_dkl, l_ckl, w: LossWeights):
    lambda_dis = w.dis_kl_weights()[0]
    total = d_loss_real + d_loss_fake + lambda_dis * l_dkl
    if w.ckl_on_d:
        total = total + w.lambda_ckl * l_ckl
    return total


def total_losses(parts: Mapping[str, float], w: LossWeights) -> LossBreakdown:
    """Recombine raw loss terms into a :class:`LossBreakdown`.

    Terms absent from ``parts`` are treated as inactive (zero).
    """
    unknown = set(parts) - set(RAW_TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    p = {name: float(parts.get(name, 0.0)) for name in RAW_TERMS}
    return LossBreakdown(
        **p,
        total_g=generator_total(p["g_adv"], p["l_re"], p["l_gkl"], p["l_ckl"], w),
        total_d=discriminator_total(p["d_loss_real"], p["d_loss_fake"], p["l_dkl"], p["l_ckl"], w),
    )


def mean_breakdown(items, w: LossWeights) -> LossBreakdown:
    """Average raw terms over ``items`` and recombine the totals."""
    items = list(items)
    if not items:
        return total_losses({}, w)
    sums = {name: 0.0 for name in RAW_TERMS}
    for b in items:
        for name in RAW_TERMS:
            sums[name] += getattr(b, name)
    return total_losses({k: v / len(items) for k, v in sums.items()}, w)


BREAKDOWN_FIELDS = tuple(f.name for f in fields(LossBreakdown))
