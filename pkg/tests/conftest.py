import numpy as np
import pytest
import torch

from uunet.backbone import UNetConfig
from uunet.data import SyntheticTaskConfig, make_synthetic
from uunet.objectives import LossWeights
from uunet.topology import PRESETS, wire
from uunet.trainer import TrainConfig, Trainer


def central_difference(f, x: torch.Tensor, index, h: float = 1e-6) -> float:
    """Central finite difference of scalar ``f`` w.r.t. one element of ``x`` (float64)."""
    x = x.detach().clone()
    orig = x[index].item()
    x[index] = orig + h
    up = float(f(x))
    x[index] = orig - h
    down = float(f(x))
    return (up - down) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def tiny_configs(base: int = 4, depth: int = 2, conditional: bool = True):
    gen = UNetConfig(in_channels=3, out_channels=3, base_channels=base, depth=depth)
    dis = UNetConfig(in_channels=6 if conditional else 3, out_channels=3, base_channels=base, depth=depth,
                     final_activation="none")
    return gen, dis


def tiny_model(preset: str = "v4+vae+tail", size: int = 16, seed: int = 0, latent_dim: int = 4, **topo_overrides):
    import dataclasses

    topo = dataclasses.replace(PRESETS[preset], **topo_overrides)
    gen, dis = tiny_configs()
    return wire(gen, dis, topo, image_size=size, latent_dim=latent_dim, conditional=True, seed=seed)


def tiny_trainer(preset: str = "v4+vae+tail", seed: int = 0, weights: LossWeights = LossWeights(), **train_kw):
    train_kw.setdefault("batch_size", 4)
    train_kw.setdefault("epochs", 2)
    model = tiny_model(preset, seed=seed)
    return Trainer(model, weights, TrainConfig(seed=seed, **train_kw))


def tiny_dataset(n: int = 8, size: int = 16, seed: int = 0, task: str = "invert"):
    return make_synthetic(SyntheticTaskConfig(task=task, n_samples=n, size=size, seed=seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
