"""Experiment configuration: TOML in, validated dataclasses out, TOML snapshot back.

Unknown keys are rejected so a typo in a lambda name fails loudly.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbone import UNetConfig
from .data import SyntheticTaskConfig, TASKS
from .objectives import LossWeights
from .topology import PRESETS, TopologyConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    task: str = "invert"
    n_samples: int = 64
    n_eval: int = 16
    seed: int = 0
    channels: int = 3

    def __post_init__(self):
        if self.source not in ("synthetic", "dir"):
            raise ValueError(f"source must be 'synthetic' or 'dir', got {self.source!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.source == "dir" and not self.path:
            raise ValueError("path is required when source = 'dir'")
        if self.n_samples < 1 or self.n_eval < 1:
            raise ValueError("n_samples and n_eval must be >= 1")

    def synthetic(self, size: int, eval_split: bool = False) -> SyntheticTaskConfig:
        return SyntheticTaskConfig(
            task=self.task,
            n_samples=self.n_eval if eval_split else self.n_samples,
            size=size,
            seed=self.seed + 1 if eval_split else self.seed,
            channels=self.channels,
        )


def _default_dis() -> UNetConfig:
    return UNetConfig(in_channels=6, out_channels=3, base_channels=8, depth=3, final_activation="none")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "uunet"
    output_dir: str = "runs/uunet"
    image_size: int = 32
    latent_dim: int = 64
    conditional: bool = True
    generator: UNetConfig = field(default_factory=lambda: UNetConfig(base_channels=8, depth=3))
    discriminator: UNetConfig = field(default_factory=_default_dis)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


# TOML key -> dataclass field, per section
_TOPOLOGY_KEYS = {"variant": "variant", "triple_concat": "triple_concat", "tail": "tail_enabled",
                  "coupled_update": "coupled_update", "vae": "vae_heads"}
_COUPLING_KEYS = {"scale": "coupling_scale", "include_adversarial": "include_adversarial"}
_OUTPUT_KEYS = {"record_timing": "record_timing"}
_TRAIN_KEYS = {f.name: f.name for f in dataclasses.fields(TrainConfig)}
for _k in ("coupling_scale", "include_adversarial", "record_timing"):
    _TRAIN_KEYS.pop(_k)
_UNET_KEYS = {f.name: f.name for f in dataclasses.fields(UNetConfig)}
_LOSS_KEYS = {f.name: f.name for f in dataclasses.fields(LossWeights)}
_DATA_KEYS = {f.name: f.name for f in dataclasses.fields(DataConfig)}


def _check_type(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _collect(table: Mapping, keymap: Dict[str, str], prefix: str, defaults) -> Dict[str, Any]:
    if not isinstance(table, Mapping):
        raise ConfigError(f"{prefix}: expected a table")
    out = {}
    for key, value in table.items():
        if key not in keymap:
            raise ConfigError(f"unknown key {prefix}.{key}")
        name = keymap[key]
        default = getattr(defaults, name)
        if hasattr(default, "value"):  # enums compare by their string value
            default = default.value
        out[name] = _check_type(f"{prefix}.{key}", value, default)
    return out


def _labels(keymap: Dict[str, str], prefix: str) -> Dict[str, str]:
    """Dataclass field -> dotted TOML key."""
    return {field_name: f"{prefix}.{key}" for key, field_name in keymap.items()}


def _construct(kwargs: Dict[str, Any], base, labels: Dict[str, str], section: str):
    """``replace(base, **kwargs)``; on failure, find the single key that breaks it."""
    try:
        return dataclasses.replace(base, **kwargs)
    except (ValueError, TypeError) as exc:
        for name, value in kwargs.items():
            try:
                dataclasses.replace(base, **{name: value})
            except (ValueError, TypeError):
                raise ConfigError(f"{labels.get(name, name)}: {exc}") from None
        raise ConfigError(f"{section}: {exc}") from None


def config_from_dict(raw: Mapping) -> ExperimentConfig:
    base = ExperimentConfig()
    top_keys = {"name", "output_dir", "model", "topology", "loss", "coupling", "train", "data", "output"}
    for key in raw:
        if key not in top_keys:
            raise ConfigError(f"unknown key {key}")
    name = _check_type("name", raw.get("name", base.name), base.name)
    output_dir = _check_type("output_dir", raw.get("output_dir", base.output_dir), base.output_dir)

    model = dict(raw.get("model", {}))
    gen_table = model.pop("generator", {})
    dis_table = model.pop("discriminator", {})
    model_keys = {"image_size": "image_size", "latent_dim": "latent_dim", "conditional": "conditional"}
    model_kw = _collect(model, model_keys, "model", base)
    conditional = model_kw.get("conditional", base.conditional)

    gen = _construct(_collect(gen_table, _UNET_KEYS, "model.generator", base.generator),
                     base.generator, _labels(_UNET_KEYS, "model.generator"), "model.generator")
    dis_kw = _collect(dis_table, _UNET_KEYS, "model.discriminator", base.discriminator)
    dis_kw.setdefault("in_channels", gen.in_channels + gen.out_channels if conditional else gen.out_channels)
    dis_kw.setdefault("depth", gen.depth)
    dis_kw.setdefault("base_channels", gen.base_channels)
    dis = _construct(dis_kw, base.discriminator, _labels(_UNET_KEYS, "model.discriminator"), "model.discriminator")

    topo_table = dict(raw.get("topology", {}))
    topo_base = base.topology
    if "preset" in topo_table:
        preset = topo_table.pop("preset")
        if preset not in PRESETS:
            raise ConfigError(f"topology.preset: unknown preset {preset!r}")
        topo_base = PRESETS[preset]
    topo = _construct(_collect(topo_table, _TOPOLOGY_KEYS, "topology", topo_base),
                      topo_base, _labels(_TOPOLOGY_KEYS, "topology"), "topology")

    loss = _construct(_collect(raw.get("loss", {}), _LOSS_KEYS, "loss", base.loss),
                      base.loss, _labels(_LOSS_KEYS, "loss"), "loss")

    train_kw = _collect(raw.get("train", {}), _TRAIN_KEYS, "train", base.train)
    train_kw.update(_collect(raw.get("coupling", {}), _COUPLING_KEYS, "coupling", base.train))
    train_kw.update(_collect(raw.get("output", {}), _OUTPUT_KEYS, "output", base.train))
    labels = {**_labels(_TRAIN_KEYS, "train"), **_labels(_COUPLING_KEYS, "coupling"), **_labels(_OUTPUT_KEYS, "output")}
    train = _construct(train_kw, base.train, labels, "train")

    data = _construct(_collect(raw.get("data", {}), _DATA_KEYS, "data", base.data),
                      base.data, _labels(_DATA_KEYS, "data"), "data")

    cfg = ExperimentConfig(name=name, output_dir=output_dir, generator=gen, discriminator=dis,
                           topology=topo, loss=loss, train=train, data=data, **model_kw)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: ExperimentConfig) -> None:
    if cfg.image_size % 2 ** cfg.generator.depth:
        raise ConfigError(f"model.image_size: {cfg.image_size} not divisible by 2^depth = {2 ** cfg.generator.depth}")
    if cfg.generator.depth != cfg.discriminator.depth:
        raise ConfigError("model.discriminator.depth: must equal the generator depth")
    if cfg.topology.needs_taps and cfg.generator.base_channels != cfg.discriminator.base_channels:
        raise ConfigError("model.discriminator.base_channels: must equal the generator's for connected topologies")
    if cfg.topology.tail_enabled and cfg.image_size < 8:
        raise ConfigError("topology.tail: images smaller than 8x8 need tail = false")
    if cfg.data.source == "synthetic" and cfg.train.batch_size > cfg.data.n_samples:
        raise ConfigError("train.batch_size: larger than data.n_samples")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def inv(obj, keymap):
        return {k: getattr(obj, v).value if hasattr(getattr(obj, v), "value") else getattr(obj, v)
                for k, v in keymap.items()}

    return {
        "name": cfg.name,
        "output_dir": cfg.output_dir,
        "model": {
            "image_size": cfg.image_size,
            "latent_dim": cfg.latent_dim,
            "conditional": cfg.conditional,
            "generator": dataclasses.asdict(cfg.generator),
            "discriminator": dataclasses.asdict(cfg.discriminator),
        },
        "topology": inv(cfg.topology, _TOPOLOGY_KEYS),
        "loss": dataclasses.asdict(cfg.loss),
        "coupling": inv(cfg.train, _COUPLING_KEYS),
        "train": inv(cfg.train, _TRAIN_KEYS),
        "data": dataclasses.asdict(cfg.data),
        "output": inv(cfg.train, _OUTPUT_KEYS),
    }


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from None
    return config_from_dict(raw)


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg))
