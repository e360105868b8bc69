"""Alternating adversarial training with coupled generator updates.

A D-step optimizes the discriminator.  When the topology routes generator
taps into the discriminator and ``coupled_update`` is on, the taps stay
attached to the generator graph and the generator is also moved by the
D-step gradient (scaled by ``coupling_scale``).  By default only the
non-adversarial D-side terms (weighted discriminator KL, cross KL) may move
the generator; ``include_adversarial`` lets the full D objective through.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .data import PairedDataset, batches, from_model_space, to_model_space
from .latent import cross_kl, kl_to_standard_normal, weighted_discriminator_kl
from .metrics import MetricReport, evaluate_images
from .objectives import (
    LossBreakdown,
    LossWeights,
    adversarial_terms,
    discriminator_total,
    generator_adversarial_term,
    generator_total,
    mean_breakdown,
    reconstruction_loss,
    total_losses,
)
from .topology import UUNetModel, parameter_group

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
CURVE_HEADER = [
    "epoch", "d_real", "d_fake", "g_adv", "l_re", "l_gkl", "l_dkl", "l_ckl",
    "total_g", "total_d", "grad_g_from_d", "wall_s",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    d_steps_per_g_step: int = 1
    coupling_scale: float = 1.0
    include_adversarial: bool = False
    debug: bool = False
    record_timing: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.d_steps_per_g_step < 1:
            raise ValueError("epochs, batch_size and d_steps_per_g_step must be >= 1")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be > 0")
        if self.coupling_scale < 0:
            raise ValueError("coupling_scale must be >= 0")


class TrainingAborted(RuntimeError):
    """A loss term or parameter went non-finite."""

    def __init__(self, term: str, value: float = float("nan"), epoch: Optional[int] = None, batch: Optional[int] = None):
        self.term = term
        self.value = value
        self.epoch = epoch
        self.batch = batch
        super().__init__(self._message())

    def _message(self) -> str:
        where = ""
        if self.epoch is not None:
            where = f" at epoch {self.epoch}, batch {self.batch}"
        return f"non-finite {self.term} ({self.value}){where}"

    def locate(self, epoch: int, batch: int) -> "TrainingAborted":
        self.epoch, self.batch = epoch, batch
        self.args = (self._message(),)
        return self


@dataclass
class StepResult:
    losses: LossBreakdown
    grad_norm_g_from_d: float = 0.0
    grad_norm_g_applied: float = 0.0
    tap_grad_norms: Dict[str, float] = field(default_factory=dict)


@dataclass
class EpochRecord:
    epoch: int
    losses: LossBreakdown
    grad_norm_g_from_d: float
    wall_time: float
    probe: float

    def curve_row(self) -> list:
        l = self.losses
        return [
            self.epoch, l.d_loss_real, l.d_loss_fake, l.g_adv, l.l_re, l.l_gkl, l.l_dkl, l.l_ckl,
            l.total_g, l.total_d, self.grad_norm_g_from_d, self.wall_time,
        ]


def _check_finite(terms: Dict[str, torch.Tensor]) -> None:
    for name, value in terms.items():
        if isinstance(value, torch.Tensor) and not bool(torch.isfinite(value).all()):
            raise TrainingAborted(name, float(value.detach().reshape(-1)[0]))


def _as_tensors(batch):
    x_in, x_tgt = batch
    return (
        to_model_space(torch.as_tensor(np.asarray(x_in), dtype=torch.float32)),
        to_model_space(torch.as_tensor(np.asarray(x_tgt), dtype=torch.float32)),
    )


def _grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(g.double().pow(2).sum())
    return math.sqrt(total)


def epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


class Trainer:
    def __init__(self, model: UUNetModel, weights: LossWeights = LossWeights(), cfg: TrainConfig = TrainConfig()):
        self.model = model
        self.weights = weights
        self.cfg = cfg
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(model.generator.parameters(), lr=cfg.lr_g, betas=betas)
        self.opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.lr_d, betas=betas)
        self.noise = torch.Generator().manual_seed(cfg.seed)
        self.records: List[EpochRecord] = []
        self.epoch = 0
        self.n_d_updates = 0
        self.n_g_updates = 0
        self.n_coupled_updates = 0
        self._g_named = list(model.generator.named_parameters())
        self._d_params = list(model.discriminator.parameters())

    @property
    def coupled(self) -> bool:
        topo = self.model.topo
        return topo.coupled_update and topo.needs_taps

    def config_digest(self) -> str:
        m = self.model
        payload = {
            "gen": dataclasses.asdict(m.gen_cfg),
            "dis": dataclasses.asdict(m.dis_cfg),
            "topo": m.topo.as_dict(),
            "image_size": m.image_size,
            "latent_dim": m.latent_dim,
            "conditional": m.conditional,
            "weights": dataclasses.asdict(self.weights),
            "train": {k: v for k, v in dataclasses.asdict(self.cfg).items() if k not in ("epochs", "debug", "record_timing")},
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    # -- steps -----------------------------------------------------------

    def _apply(self, params, grads, optimizer, scale: float = 1.0) -> None:
        for p, g in zip(params, grads):
            p.grad = None if g is None else g * scale if scale != 1.0 else g
        optimizer.step()
        for p in params:
            p.grad = None
        if self.cfg.debug:
            for name, p in self.model.named_parameters():
                if not bool(torch.isfinite(p).all()):
                    raise TrainingAborted(f"parameter {name}")

    def d_step(self, x_in: torch.Tensor, x_tgt: torch.Tensor):
        m, w = self.model, self.weights
        coupled = self.coupled
        with torch.set_grad_enabled(coupled):
            gen = m.generator_forward(x_in, self.noise, live_taps=coupled)
        fake = gen.image.detach()
        real_out = m.discriminator_forward(m.d_input(x_in, x_tgt), gen.taps, self.noise)
        fake_out = m.discriminator_forward(m.d_input(x_in, fake), gen.taps, self.noise)
        d_real, d_fake = adversarial_terms(real_out, fake_out)
        l_dkl = l_ckl = torch.zeros(())
        lambda_dis, alpha, beta = w.dis_kl_weights()
        if m.topo.vae_heads:
            l_dkl = weighted_discriminator_kl(
                kl_to_standard_normal(real_out.q), kl_to_standard_normal(fake_out.q), alpha, beta
            )
            q_gen = gen.q if coupled else gen.q.detach()
            l_ckl = cross_kl(q_gen, fake_out.q)
        total_d = discriminator_total(d_real, d_fake, l_dkl, l_ckl, w)
        _check_finite({"d_loss_real": d_real, "d_loss_fake": d_fake, "l_dkl": l_dkl, "l_ckl": l_ckl, "total_d": total_d})

        g_params = [p for _, p in self._g_named]
        nd = len(self._d_params)
        tap_norms: Dict[str, float] = {}
        full_norm = applied_norm = 0.0
        if coupled:
            aux = lambda_dis * l_dkl + (w.lambda_ckl * l_ckl if w.ckl_on_d else 0.0)
            need_aux = not self.cfg.include_adversarial and isinstance(aux, torch.Tensor) and aux.requires_grad
            grads = torch.autograd.grad(total_d, self._d_params + g_params, allow_unused=True, retain_graph=need_aux)
            d_grads, g_full = grads[:nd], grads[nd:]
            full_norm = _grad_norm(g_full)
            sq: Dict[str, float] = {}
            for (name, _), g in zip(self._g_named, g_full):
                group = parameter_group(name)
                sq[group] = sq.get(group, 0.0) + (0.0 if g is None else float(g.double().pow(2).sum()))
            tap_norms = {k: math.sqrt(v) for k, v in sq.items()}
            if self.cfg.include_adversarial:
                g_applied = g_full
            elif need_aux:
                g_applied = torch.autograd.grad(aux, g_params, allow_unused=True)
            else:
                g_applied = [None] * len(g_params)
        else:
            d_grads = torch.autograd.grad(total_d, self._d_params, allow_unused=True)
            g_applied = None
        self._apply(self._d_params, d_grads, self.opt_d)
        self.n_d_updates += 1
        if g_applied is not None and self.cfg.coupling_scale > 0 and any(g is not None for g in g_applied):
            applied_norm = self.cfg.coupling_scale * _grad_norm(g_applied)
            self._apply(g_params, g_applied, self.opt_g, self.cfg.coupling_scale)
            self.n_coupled_updates += 1
        parts = {
            "d_loss_real": d_real.item(), "d_loss_fake": d_fake.item(), "l_dkl": l_dkl.item(),
        }
        return parts, full_norm, applied_norm, tap_norms

    def g_step(self, x_in: torch.Tensor, x_tgt: torch.Tensor) -> Dict[str, float]:
        m, w = self.model, self.weights
        gen = m.generator_forward(x_in, self.noise, live_taps=True)
        fake_out = m.discriminator_forward(m.d_input(x_in, gen.image), gen.taps, self.noise)
        g_adv = generator_adversarial_term(fake_out)
        l_re = reconstruction_loss(x_tgt, gen.image)
        l_gkl = l_ckl = torch.zeros(())
        if m.topo.vae_heads:
            l_gkl = kl_to_standard_normal(gen.q)
            l_ckl = cross_kl(gen.q, fake_out.q)
        total_g = generator_total(g_adv, l_re, l_gkl, l_ckl, w)
        _check_finite({"g_adv": g_adv, "l_re": l_re, "l_gkl": l_gkl, "l_ckl": l_ckl, "total_g": total_g})
        g_params = [p for _, p in self._g_named]
        grads = torch.autograd.grad(total_g, g_params, allow_unused=True)
        self._apply(g_params, grads, self.opt_g)
        self.n_g_updates += 1
        return {"g_adv": g_adv.item(), "l_re": l_re.item(), "l_gkl": l_gkl.item(), "l_ckl": l_ckl.item()}

    def train_step(self, batch) -> StepResult:
        """``d_steps_per_g_step`` D-steps then one G-step on the same batch."""
        self.model.train()
        x_in, x_tgt = _as_tensors(batch)
        grad_norms, applied = [], []
        for _ in range(self.cfg.d_steps_per_g_step):
            d_parts, full_norm, applied_norm, tap_norms = self.d_step(x_in, x_tgt)
            grad_norms.append(full_norm)
            applied.append(applied_norm)
        g_parts = self.g_step(x_in, x_tgt)
        losses = total_losses({**d_parts, **g_parts}, self.weights)
        return StepResult(losses, float(np.mean(grad_norms)), float(np.mean(applied)), tap_norms)

    # -- epochs ----------------------------------------------------------

    def train(
        self,
        dataset: PairedDataset,
        epochs: Optional[int] = None,
        checkpoint_path=None,
        curve_path=None,
        probe_batch=None,
    ) -> List[EpochRecord]:
        """Train until ``epochs`` epochs are complete (resumes from ``self.epoch``)."""
        epochs = self.cfg.epochs if epochs is None else epochs
        if probe_batch is None:
            probe_batch = dataset.arrays(list(range(min(self.cfg.batch_size, len(dataset)))))
        while self.epoch < epochs:
            e = self.epoch + 1
            t0 = time.perf_counter()
            steps = []
            for b, batch in enumerate(batches(dataset, self.cfg.batch_size, epoch_seed(self.cfg.seed, e))):
                try:
                    steps.append(self.train_step(batch))
                except TrainingAborted as exc:
                    raise exc.locate(e, b)
            losses = mean_breakdown([s.losses for s in steps], self.weights)
            gnorm = float(np.mean([s.grad_norm_g_from_d for s in steps]))
            probe = freeze_discriminator_probe(self.model, probe_batch)
            wall = time.perf_counter() - t0 if self.cfg.record_timing else 0.0
            self.records.append(EpochRecord(e, losses, gnorm, wall, probe))
            self.epoch = e
            log.info("epoch %d: l_re=%.4f d_real=%.4f g_adv=%.4f", e, losses.l_re, losses.d_loss_real, losses.g_adv)
            if checkpoint_path is not None:
                self.save_checkpoint(checkpoint_path)
        if curve_path is not None:
            write_loss_curve(self.records, curve_path)
        return self.records

    # -- checkpoints -----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config_digest": self.config_digest(),
            "epoch": self.epoch,
            "rng_state": {"noise": self.noise.get_state()},
            "model": self.model.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "counters": {"d": self.n_d_updates, "g": self.n_g_updates, "coupled": self.n_coupled_updates},
            "records": [
                {**dataclasses.asdict(r), "losses": r.losses.as_dict()} for r in self.records
            ],
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {state.get('format_version')!r}")
        if state["config_digest"] != self.config_digest():
            raise ValueError("checkpoint was written for a different model/loss/training config")
        self.model.load_state_dict(state["model"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.noise.set_state(state["rng_state"]["noise"])
        self.epoch = state["epoch"]
        c = state["counters"]
        self.n_d_updates, self.n_g_updates, self.n_coupled_updates = c["d"], c["g"], c["coupled"]
        self.records = [
            EpochRecord(**{**r, "losses": LossBreakdown(**r["losses"])}) for r in state["records"]
        ]

    def save_checkpoint(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.state_dict(), tmp)
        os.replace(tmp, path)

    def load_checkpoint(self, path) -> None:
        self.load_state_dict(torch.load(path, weights_only=False))


def freeze_discriminator_probe(model: UUNetModel, batch, seed: int = 0) -> float:
    """Discriminator real-sample loss ``-mean log D(real)`` on one batch, without updating anything.

    Uses its own seeded noise stream so it never disturbs training.
    """
    was_training = model.training
    model.eval()
    try:
        x_in, x_tgt = _as_tensors(batch)
        noise = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            gen = model.generator_forward(x_in, noise)
            out = model.discriminator_forward(model.d_input(x_in, x_tgt), gen.taps, noise)
            real, _ = adversarial_terms(out, out)
    finally:
        model.train(was_training)
    return float(real)


def evaluate(model: UUNetModel, dataset: PairedDataset, batch_size: int = 16) -> MetricReport:
    """Translate every input with the generator (latent means, no sampling) and score against targets."""
    was_training = model.training
    model.eval()
    outputs = []
    try:
        with torch.no_grad():
            for start in range(0, len(dataset), batch_size):
                idx = list(range(start, min(start + batch_size, len(dataset))))
                x_in, _ = dataset.arrays(idx)
                y = model.generator_forward(to_model_space(torch.from_numpy(x_in))).image
                outputs.append(from_model_space(y).clamp(0, 1).numpy())
    finally:
        model.train(was_training)
    _, targets = dataset.arrays()
    return evaluate_images(np.concatenate(outputs), targets)


def write_loss_curve(records: List[EpochRecord], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for r in records:
            writer.writerow(r.curve_row())
    os.replace(tmp, path)


def read_loss_curve(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
