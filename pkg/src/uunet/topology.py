"""Wiring of the generator-U and discriminator-U into one UU-Net model.

Variants (value used in config files in brackets):

========================  =====  ==================================================
name                      value  cross connections into the discriminator
========================  =====  ==================================================
``NONE``                  none   none (pix2pix-like baseline)
``ENCODER_ENCODER``       v1     G encoder skip k -> D encoder level k
``LATENT_ONLY``           v2     G latent (bottleneck, or z with VAE heads) -> D bottleneck
``DECODER_DECODER``       v3     G decoder level k -> D decoder level k
``FULL``                  v4     v1 + v3
========================  =====  ==================================================

With ``triple_concat`` the discriminator decoder instead concatenates the
*generator encoder* skip at each level, next to its own path and its own
encoder skip.  The labels "UUnet", "UUCnet", "UZnet", "UCnet" and "fUUnet"
used in older result tables map to v1, v1, v2, v3 and v4.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ShapeError, UNetConfig, build_decoder, build_encoder, init_weights
from .latent import GaussianLatent, LatentHead, broadcast_latent, reparameterize


class Variant(str, Enum):
    NONE = "none"
    ENCODER_ENCODER = "v1"
    LATENT_ONLY = "v2"
    DECODER_DECODER = "v3"
    FULL = "v4"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        aliases = {
            "v1_encoder_encoder": cls.ENCODER_ENCODER,
            "v2_latent_only": cls.LATENT_ONLY,
            "v3_decoder_decoder": cls.DECODER_DECODER,
            "v4_full": cls.FULL,
        }
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown topology variant {value!r}; choose from {[v.value for v in cls]}") from None


@dataclass(frozen=True)
class TopologyConfig:
    variant: Variant = Variant.NONE
    triple_concat: bool = False
    tail_enabled: bool = True
    coupled_update: bool = True
    vae_heads: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.triple_concat and self.variant not in (Variant.DECODER_DECODER, Variant.FULL):
            raise ValueError("triple_concat needs decoder-side wiring (variant v3 or v4)")

    @property
    def connects_encoder(self) -> bool:
        return self.variant in (Variant.ENCODER_ENCODER, Variant.FULL)

    @property
    def connects_latent(self) -> bool:
        return self.variant is Variant.LATENT_ONLY

    @property
    def connects_decoder(self) -> bool:
        return self.variant in (Variant.DECODER_DECODER, Variant.FULL)

    @property
    def needs_taps(self) -> bool:
        return self.variant is not Variant.NONE

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d


def _build_presets() -> Dict[str, TopologyConfig]:
    bases = [
        ("none", dict(variant=Variant.NONE)),
        ("v1", dict(variant=Variant.ENCODER_ENCODER)),
        ("v2", dict(variant=Variant.LATENT_ONLY)),
        ("v3", dict(variant=Variant.DECODER_DECODER)),
        ("v4", dict(variant=Variant.FULL)),
        ("v4_triple", dict(variant=Variant.FULL, triple_concat=True)),
    ]
    presets = {}
    for name, kw in bases:
        for vae in (False, True):
            for tail in (False, True):
                label = name + ("+vae" if vae else "") + ("+tail" if tail else "")
                presets[label] = TopologyConfig(vae_heads=vae, tail_enabled=tail, **kw)
    return presets


PRESETS: Dict[str, TopologyConfig] = _build_presets()


@dataclass
class GeneratorTaps:
    enc_skips: List[torch.Tensor]
    latent: torch.Tensor
    dec_taps: List[torch.Tensor]

    def detach(self) -> "GeneratorTaps":
        return GeneratorTaps(
            [t.detach() for t in self.enc_skips],
            self.latent.detach(),
            [t.detach() for t in self.dec_taps],
        )


@dataclass
class GeneratorOutput:
    image: torch.Tensor
    taps: GeneratorTaps
    q: Optional[GaussianLatent] = None
    z: Optional[torch.Tensor] = None


@dataclass
class DiscriminatorOutput:
    score: torch.Tensor  # (N,), post-sigmoid
    patch_map: Optional[torch.Tensor] = None
    q: Optional[GaussianLatent] = None
    logit: Optional[torch.Tensor] = None  # pre-sigmoid score, tail only


class Tail(nn.Module):
    """Shrinks an image-resolution map to one score per sample.

    Stride-2 3x3 convs (8, 16, 32, ... channels) until the map is at most
    4x4, then a 1x1 conv to one channel, global average and sigmoid.
    """

    def __init__(self, in_channels: int, image_size: int):
        super().__init__()
        if image_size < 8:
            raise ValueError(
                f"tail needs inputs of at least 8x8 to shrink, got {image_size}; set tail_enabled=false"
            )
        layers: list = []
        c_in, c_out, size = in_channels, 8, image_size
        while size > 4:
            layers += [nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in, c_out = c_out, c_out * 2
            size = (size + 1) // 2
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(c_in, 1, kernel_size=1)

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() != 4 or min(features.shape[2:]) < 8:
            raise ShapeError(
                f"tail input must be (N, C, H, W) with H, W >= 8, got {tuple(features.shape)}; "
                "set tail_enabled=false for smaller images"
            )
        return self.out(self.body(features)).mean(dim=(1, 2, 3))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(features))


def tail_forward(tail: Tail, features: torch.Tensor) -> torch.Tensor:
    return tail(features)


class Generator(nn.Module):
    def __init__(self, cfg: UNetConfig, latent_dim: int = 64, vae: bool = False):
        super().__init__()
        self.cfg = cfg
        self.vae = vae
        self.latent_dim = latent_dim
        self.encoder = build_encoder(cfg)
        self.decoder = build_decoder(cfg, bottleneck_extra=latent_dim if vae else 0)
        self.latent_head = LatentHead(cfg.bottleneck_channels, latent_dim) if vae else None

    @property
    def latent_channels(self) -> int:
        return self.latent_dim if self.vae else self.cfg.bottleneck_channels

    def forward(self, x: torch.Tensor, noise: Optional[torch.Generator] = None) -> GeneratorOutput:
        """With VAE heads, ``z`` is sampled from ``noise``; without ``noise`` the mean is used."""
        enc_out = self.encoder(x)
        b = enc_out.bottleneck
        q = z = None
        if self.vae:
            q = self.latent_head(b)
            z = reparameterize(q, noise).z if noise is not None else q.mu
            latent = broadcast_latent(z, b.shape[2], b.shape[3])
            dec_in = torch.cat([b, latent], dim=1)
        else:
            latent = dec_in = b
        image, dec_taps = self.decoder(dec_in, enc_out.skips)
        return GeneratorOutput(image, GeneratorTaps(enc_out.skips, latent, dec_taps), q, z)


class Discriminator(nn.Module):
    def __init__(
        self,
        cfg: UNetConfig,
        topo: TopologyConfig,
        image_size: int,
        gen_cfg: Optional[UNetConfig] = None,
        gen_latent_channels: int = 0,
        latent_dim: int = 64,
    ):
        super().__init__()
        self.cfg = cfg
        self.topo = topo
        gen_cfg = gen_cfg or cfg
        ladder = [gen_cfg.level_channels(k) for k in range(cfg.depth)]
        self.vae = topo.vae_heads
        bottleneck_extra = (latent_dim if self.vae else 0) + (gen_latent_channels if topo.connects_latent else 0)
        dec_cfg = cfg if topo.tail_enabled else dataclasses.replace(cfg, out_channels=1)
        self.encoder = build_encoder(cfg, ladder if topo.connects_encoder else None)
        self.decoder = build_decoder(dec_cfg, ladder if topo.connects_decoder else None, bottleneck_extra)
        self.tail = Tail(cfg.out_channels, image_size) if topo.tail_enabled else None
        self.latent_head = LatentHead(cfg.bottleneck_channels, latent_dim) if self.vae else None

    def forward(
        self,
        x: torch.Tensor,
        taps: Optional[GeneratorTaps] = None,
        noise: Optional[torch.Generator] = None,
    ) -> DiscriminatorOutput:
        topo = self.topo
        if topo.needs_taps and taps is None:
            raise ValueError(f"topology {topo.variant.value} requires generator taps")
        enc_out = self.encoder(x, taps.enc_skips if topo.connects_encoder else None)
        b = enc_out.bottleneck
        parts = [b]
        q = None
        if self.vae:
            q = self.latent_head(b)
            z = reparameterize(q, noise).z if noise is not None else q.mu
            parts.append(broadcast_latent(z, b.shape[2], b.shape[3]))
        if topo.connects_latent:
            if taps.latent.shape[0] != b.shape[0] or taps.latent.shape[2:] != b.shape[2:]:
                raise ShapeError(
                    f"generator latent {tuple(taps.latent.shape)} does not match "
                    f"discriminator bottleneck {tuple(b.shape)}"
                )
            parts.append(taps.latent)
        dec_extras = None
        if topo.connects_decoder:
            dec_extras = taps.enc_skips if topo.triple_concat else taps.dec_taps
        y, _ = self.decoder(torch.cat(parts, dim=1), enc_out.skips, dec_extras)
        if self.tail is not None:
            logit = self.tail.logits(y)
            return DiscriminatorOutput(torch.sigmoid(logit), None, q, logit)
        patch = torch.sigmoid(F.avg_pool2d(y, 2 ** self.cfg.depth))
        return DiscriminatorOutput(patch.mean(dim=(1, 2, 3)), patch, q)


class UUNetModel(nn.Module):
    """Generator-U and discriminator-U with the declared cross connections."""

    def __init__(
        self,
        gen_cfg: UNetConfig,
        dis_cfg: UNetConfig,
        topo: TopologyConfig,
        image_size: int = 64,
        latent_dim: int = 64,
        conditional: bool = False,
    ):
        super().__init__()
        self.gen_cfg = gen_cfg
        self.dis_cfg = dis_cfg
        self.topo = topo
        self.image_size = image_size
        self.latent_dim = latent_dim
        self.conditional = conditional
        self.generator = Generator(gen_cfg, latent_dim, topo.vae_heads)
        self.discriminator = Discriminator(
            dis_cfg, topo, image_size, gen_cfg, self.generator.latent_channels, latent_dim
        )

    def generator_forward(
        self, x: torch.Tensor, noise: Optional[torch.Generator] = None, live_taps: bool = True
    ) -> GeneratorOutput:
        out = self.generator(x, noise)
        if not live_taps:
            out.taps = out.taps.detach()
        return out

    def discriminator_forward(
        self,
        x: torch.Tensor,
        taps: Optional[GeneratorTaps] = None,
        noise: Optional[torch.Generator] = None,
    ) -> DiscriminatorOutput:
        return self.discriminator(x, taps if self.topo.needs_taps else None, noise)

    def d_input(self, x_in: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        """What the discriminator sees: the judged image, prefixed by the condition when conditional."""
        return torch.cat([x_in, image], dim=1) if self.conditional else image

    def generator_groups(self) -> Dict[str, List[nn.Parameter]]:
        groups: Dict[str, List[nn.Parameter]] = {}
        for name, p in self.generator.named_parameters():
            groups.setdefault(parameter_group(name), []).append(p)
        return groups


def parameter_group(name: str) -> str:
    """Map a generator parameter name to its reachability group."""
    parts = name.split(".")
    if parts[0] == "encoder":
        return "bottleneck" if parts[1] == "bottleneck" else f"encoder.{parts[2]}"
    if parts[0] == "decoder":
        return "head" if parts[1] == "head" else f"decoder.{parts[2]}"
    if parts[0] == "latent_head":
        return "latent"
    raise KeyError(name)


def wire(
    gen_cfg: UNetConfig,
    dis_cfg: UNetConfig,
    topo: TopologyConfig,
    image_size: int = 64,
    latent_dim: int = 64,
    conditional: bool = False,
    seed: int = 0,
) -> UUNetModel:
    """Build and initialize a UU-Net.

    The generator is initialized from ``seed`` and the discriminator from
    ``seed + 1``, so a discriminator can be rebuilt on its own.
    """
    if gen_cfg.depth != dis_cfg.depth:
        raise ValueError(f"generator depth {gen_cfg.depth} != discriminator depth {dis_cfg.depth}")
    if topo.needs_taps and gen_cfg.base_channels != dis_cfg.base_channels:
        raise ValueError(
            f"channel ladders differ at connected levels: generator base {gen_cfg.base_channels}, "
            f"discriminator base {dis_cfg.base_channels}"
        )
    if image_size % 2 ** gen_cfg.depth:
        raise ValueError(f"image_size {image_size} not divisible by 2^depth = {2 ** gen_cfg.depth}")
    want_in = gen_cfg.in_channels + gen_cfg.out_channels if conditional else gen_cfg.out_channels
    if dis_cfg.in_channels != want_in:
        raise ValueError(
            f"discriminator in_channels must be {want_in} ({'conditional' if conditional else 'unconditional'}), "
            f"got {dis_cfg.in_channels}"
        )
    model = UUNetModel(gen_cfg, dis_cfg, topo, image_size, latent_dim, conditional)
    init_weights(model.generator, seed)
    init_weights(model.discriminator, seed + 1)
    return model


def declared_reachability(topo: TopologyConfig, depth: int) -> Dict[str, bool]:
    """Generator groups that the wiring connects to the discriminator score.

    Derived from the topology alone; :func:`gradient_reachability` measures
    the same thing with autograd.
    """
    enc = {f"encoder.{k}" for k in range(depth)}
    dec = {f"decoder.{k}" for k in range(depth)}
    groups = sorted(enc) + ["bottleneck"] + sorted(dec) + ["head"] + (["latent"] if topo.vae_heads else [])
    latent = {"latent"} if topo.vae_heads else set()
    reach = set()
    if topo.connects_encoder:
        reach |= enc
    if topo.connects_latent:
        reach |= enc | {"bottleneck"} | latent
    if topo.connects_decoder:
        reach |= enc if topo.triple_concat else enc | {"bottleneck"} | latent | dec
    return {g: g in reach for g in groups}


def gradient_reachability(
    model: UUNetModel, probe_input: Optional[torch.Tensor] = None, seed: int = 0
) -> Dict[str, bool]:
    """Which generator groups get a nonzero gradient from the discriminator score via taps.

    The fake image is detached before it enters the discriminator, so only
    the cross-network connections can carry gradient.
    """
    if probe_input is None:
        gen = torch.Generator().manual_seed(seed)
        s = model.image_size
        probe_input = torch.rand((2, model.gen_cfg.in_channels, s, s), generator=gen) * 2 - 1
    groups = model.generator_groups()
    names = list(groups)
    params = [p for n in names for p in groups[n]]
    out = model.generator_forward(probe_input)
    score = model.discriminator_forward(model.d_input(probe_input, out.image.detach()), out.taps).score
    grads = torch.autograd.grad(score.sum(), params, allow_unused=True)
    result = {}
    i = 0
    for n in names:
        chunk = grads[i : i + len(groups[n])]
        i += len(groups[n])
        result[n] = any(g is not None and bool(g.abs().sum() > 0) for g in chunk)
    return result
