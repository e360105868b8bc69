"""Single-U encoder/decoder stacks shared by the generator and the discriminator.

Both networks in a UU-Net are built from the same two pieces: an :class:`Encoder`
that halves resolution and doubles width at each level, and a :class:`Decoder`
that mirrors it.  Either side can accept *extra* skip tensors per level, which
is how cross-network connections are spliced in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import torch
import torch.nn as nn

ACTIVATIONS = {
    "relu": lambda: nn.ReLU(),
    "leaky_relu": lambda: nn.LeakyReLU(0.2),
    "elu": lambda: nn.ELU(),
}
FINAL_ACTIVATIONS = {
    "tanh": nn.Tanh,
    "sigmoid": nn.Sigmoid,
    "none": nn.Identity,
}
NORMS = ("none", "batch")


class ShapeError(ValueError):
    """Raised when a tensor does not match the channel/spatial contract of a level."""


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 16
    depth: int = 3
    activation: str = "relu"
    norm: str = "none"
    final_activation: str = "tanh"
    max_params: int = 20_000_000

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "base_channels", "depth"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(
                f"unknown final_activation {self.final_activation!r}; choose from {sorted(FINAL_ACTIVATIONS)}"
            )
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; choose from {list(NORMS)}")

    def level_channels(self, k: int) -> int:
        """Width of encoder level ``k`` (level ``depth`` is the bottleneck)."""
        return self.base_channels * 2 ** k

    @property
    def bottleneck_channels(self) -> int:
        return self.level_channels(self.depth)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4:
            raise ShapeError(f"expected a (N, C, H, W) feature map, got shape {tuple(x.shape)}")
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"input has {c} channels, config expects {self.in_channels}")
        factor = 2 ** self.depth
        if h % factor or w % factor:
            raise ShapeError(
                f"spatial dims ({h}, {w}) are not divisible by 2^depth = {factor} (depth={self.depth})"
            )


class EncoderOutput(NamedTuple):
    bottleneck: torch.Tensor
    skips: List[torch.Tensor]  # shallowest first


def conv_block(in_channels: int, out_channels: int, activation: str = "relu", norm: str = "none") -> nn.Sequential:
    layers: list = []
    for c_in in (in_channels, out_channels):
        layers.append(nn.Conv2d(c_in, out_channels, kernel_size=3, padding=1))
        if norm == "batch":
            layers.append(nn.BatchNorm2d(out_channels))
        layers.append(ACTIVATIONS[activation]())
    return nn.Sequential(*layers)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def init_weights(module: nn.Module, seed: int, std: float = 0.02) -> None:
    """Gaussian init (std 0.02) for every conv/linear weight, zero biases."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * std)
                m.bias.zero_()


def _check_extras(declared: Sequence[int], supplied: Optional[Sequence[torch.Tensor]], spatial, where: str):
    """Validate supplied extra skip tensors against the declared per-level widths."""
    if supplied is None:
        if any(declared):
            raise ShapeError(f"{where} was built with extra skips {list(declared)} but none were supplied")
        return
    if not any(declared):
        raise ShapeError(f"{where} was built without extra skips but {len(supplied)} were supplied")
    if len(supplied) != len(declared):
        raise ShapeError(f"{where} expects {len(declared)} extra skips, got {len(supplied)}")
    for k, (want, t) in enumerate(zip(declared, supplied)):
        if want == 0:
            if t is not None:
                raise ShapeError(f"{where} level {k}: no extra skip declared but a tensor was supplied")
            continue
        if t is None:
            raise ShapeError(f"{where} level {k}: extra skip of {want} channels declared but missing")
        h, w = spatial[k]
        if t.dim() != 4 or t.shape[1] != want or tuple(t.shape[2:]) != (h, w):
            raise ShapeError(
                f"{where} level {k}: expected extra skip (N, {want}, {h}, {w}), got {tuple(t.shape)}"
            )


class Encoder(nn.Module):
    """Two 3x3 convs + activation per level, then 2x2 stride-2 max pool.

    ``extra_skip_channels[k]`` widens the input of level ``k`` so that a
    same-resolution tensor from another network can be concatenated in.
    """

    def __init__(self, cfg: UNetConfig, extra_skip_channels: Optional[Sequence[int]] = None):
        super().__init__()
        extras = list(extra_skip_channels) if extra_skip_channels is not None else [0] * cfg.depth
        if len(extras) != cfg.depth:
            raise ValueError(f"extra_skip_channels needs {cfg.depth} entries, got {len(extras)}")
        if any(e < 0 for e in extras):
            raise ValueError("extra_skip_channels entries must be >= 0")
        self.cfg = cfg
        self.extra_skip_channels = tuple(extras)
        self.levels = nn.ModuleList()
        c_prev = cfg.in_channels
        for k in range(cfg.depth):
            c_k = cfg.level_channels(k)
            self.levels.append(conv_block(c_prev + extras[k], c_k, cfg.activation, cfg.norm))
            c_prev = c_k
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)
        self.bottleneck = conv_block(c_prev, cfg.bottleneck_channels, cfg.activation, cfg.norm)

    def forward(self, x: torch.Tensor, extra_skips: Optional[Sequence[torch.Tensor]] = None) -> EncoderOutput:
        self.cfg.check_input(x)
        h, w = x.shape[2:]
        spatial = [(h // 2 ** k, w // 2 ** k) for k in range(self.cfg.depth)]
        _check_extras(self.extra_skip_channels, extra_skips, spatial, "encoder")
        skips = []
        out = x
        for k, level in enumerate(self.levels):
            if extra_skips is not None and extra_skips[k] is not None:
                out = torch.cat([out, extra_skips[k]], dim=1)
            out = level(out)
            skips.append(out)
            out = self.pool(out)
        return EncoderOutput(self.bottleneck(out), skips)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`.

    Each level: nearest-neighbour x2 upsample, 3x3 stride-1 transposed conv,
    concatenation with the own-encoder skip (plus any declared extra skip),
    then two 3x3 convs.  A final 1x1 conv maps to ``out_channels``.
    ``bottleneck_extra`` widens the decoder input for tensors concatenated
    onto the bottleneck (latent codes).
    """

    def __init__(
        self,
        cfg: UNetConfig,
        extra_skip_channels: Optional[Sequence[int]] = None,
        bottleneck_extra: int = 0,
    ):
        super().__init__()
        extras = list(extra_skip_channels) if extra_skip_channels is not None else [0] * cfg.depth
        if len(extras) != cfg.depth:
            raise ValueError(f"extra_skip_channels needs {cfg.depth} entries, got {len(extras)}")
        if any(e < 0 for e in extras) or bottleneck_extra < 0:
            raise ValueError("extra channel counts must be >= 0")
        self.cfg = cfg
        self.extra_skip_channels = tuple(extras)
        self.bottleneck_extra = bottleneck_extra
        self.ups = nn.ModuleList()
        self.levels = nn.ModuleList()
        # built shallowest first so index k matches skip k
        for k in range(cfg.depth):
            c_k = cfg.level_channels(k)
            c_in = cfg.level_channels(k + 1) + (bottleneck_extra if k == cfg.depth - 1 else 0)
            self.ups.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.ConvTranspose2d(c_in, c_k, kernel_size=3, stride=1, padding=1),
                )
            )
            self.levels.append(conv_block(2 * c_k + extras[k], c_k, cfg.activation, cfg.norm))
        self.head = nn.Conv2d(cfg.base_channels, cfg.out_channels, kernel_size=1)
        self.final = FINAL_ACTIVATIONS[cfg.final_activation]()

    def concat_widths(self) -> List[int]:
        """Channel width of the concatenation at each level (shallowest first)."""
        return [2 * self.cfg.level_channels(k) + self.extra_skip_channels[k] for k in range(self.cfg.depth)]

    def forward(
        self,
        bottleneck: torch.Tensor,
        skips: Sequence[torch.Tensor],
        extra_skips: Optional[Sequence[torch.Tensor]] = None,
    ):
        cfg = self.cfg
        if len(skips) != cfg.depth:
            raise ShapeError(f"decoder expects {cfg.depth} encoder skips, got {len(skips)}")
        want_c = cfg.bottleneck_channels + self.bottleneck_extra
        if bottleneck.dim() != 4 or bottleneck.shape[1] != want_c:
            raise ShapeError(f"decoder bottleneck: expected {want_c} channels, got shape {tuple(bottleneck.shape)}")
        spatial = [tuple(s.shape[2:]) for s in skips]
        _check_extras(self.extra_skip_channels, extra_skips, spatial, "decoder")
        taps: List[Optional[torch.Tensor]] = [None] * cfg.depth
        out = bottleneck
        for k in reversed(range(cfg.depth)):
            out = self.ups[k](out)
            skip = skips[k]
            if out.shape[2:] != skip.shape[2:] or skip.shape[1] != cfg.level_channels(k):
                raise ShapeError(
                    f"decoder level {k}: upsampled path {tuple(out.shape)} does not match "
                    f"encoder skip {tuple(skip.shape)} (expected {cfg.level_channels(k)} channels)"
                )
            parts = [out, skip]
            if extra_skips is not None and extra_skips[k] is not None:
                parts.append(extra_skips[k])
            out = self.levels[k](torch.cat(parts, dim=1))
            taps[k] = out
        return self.final(self.head(out)), taps


def build_encoder(cfg: UNetConfig, extra_skip_channels: Optional[Sequence[int]] = None) -> Encoder:
    enc = Encoder(cfg, extra_skip_channels)
    n = count_parameters(enc)
    if n > cfg.max_params:
        raise ValueError(f"encoder has {n} parameters, above the cap of {cfg.max_params}")
    return enc


def build_decoder(
    cfg: UNetConfig, extra_skip_channels: Optional[Sequence[int]] = None, bottleneck_extra: int = 0
) -> Decoder:
    dec = Decoder(cfg, extra_skip_channels, bottleneck_extra)
    n = count_parameters(dec)
    if n > cfg.max_params:
        raise ValueError(f"decoder has {n} parameters, above the cap of {cfg.max_params}")
    return dec


def forward_unet(
    enc: Encoder,
    dec: Decoder,
    x: torch.Tensor,
    extra_skips: Optional[Sequence[torch.Tensor]] = None,
    encoder_extras: Optional[Sequence[torch.Tensor]] = None,
):
    """Run encoder then decoder; returns ``(y, encoder_output, decoder_taps)``.

    ``extra_skips`` go to the decoder levels, ``encoder_extras`` to the
    encoder levels.  ``decoder_taps[k]`` is the output of decoder level ``k``
    (shallowest first), exposed so another network can consume it.
    """
    enc_out = enc(x, encoder_extras)
    y, taps = dec(enc_out.bottleneck, enc_out.skips, extra_skips)
    return y, enc_out, taps


class UNet(nn.Module):
    """Plain encoder + decoder pair, no cross-network wiring."""

    def __init__(self, cfg: UNetConfig, seed: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg)
        self.decoder = build_decoder(cfg)
        if seed is not None:
            init_weights(self, seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y, _, _ = forward_unet(self.encoder, self.decoder, x)
        return y
