"""Paired image data: AB-concatenated directories and synthetic toy tasks.

Pixels are kept as ``uint8`` so that export/import through PNG is lossless;
float views in ``[0, 1]`` are derived as ``u / 255``.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
SPLITS = ("train", "val", "test", "all")
TASKS = ("invert", "channel_swap", "edge_from_blob")


@dataclass(frozen=True)
class PairedSample:
    input_image: np.ndarray  # (C, H, W) float32 in [0, 1]
    target_image: np.ndarray
    id: str


class PairedDataset:
    """Immutable stack of ``(input, target)`` pairs stored as uint8 ``(N, C, H, W)``."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, ids: Sequence[str], n_skipped: int = 0):
        if inputs.shape != targets.shape:
            raise ValueError(f"input/target stacks differ: {inputs.shape} vs {targets.shape}")
        if inputs.dtype != np.uint8 or targets.dtype != np.uint8:
            raise TypeError("pixel stacks must be uint8")
        if len(ids) != len(inputs):
            raise ValueError("one id per sample required")
        if len(ids) == 0:
            raise ValueError("no samples")
        self._inputs = inputs
        self._targets = targets
        self._inputs.setflags(write=False)
        self._targets.setflags(write=False)
        self.ids = tuple(ids)
        self.n_skipped = n_skipped

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> PairedSample:
        return PairedSample(to_unit(self._inputs[i]), to_unit(self._targets[i]), self.ids[i])

    @property
    def raw_inputs(self) -> np.ndarray:
        return self._inputs

    @property
    def raw_targets(self) -> np.ndarray:
        return self._targets

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self._inputs.shape[1:])

    def arrays(self, indices=None) -> Tuple[np.ndarray, np.ndarray]:
        """Float32 ``[0, 1]`` stacks for the given indices (all by default)."""
        if indices is None:
            return to_unit(self._inputs), to_unit(self._targets)
        return to_unit(self._inputs[indices]), to_unit(self._targets[indices])

    def subset(self, indices) -> "PairedDataset":
        indices = list(indices)
        return PairedDataset(
            self._inputs[indices].copy(), self._targets[indices].copy(), [self.ids[i] for i in indices]
        )


def to_unit(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(255.0)


def to_model_space(x01):
    """[0, 1] -> [-1, 1]."""
    return x01 * 2.0 - 1.0


def from_model_space(x):
    """[-1, 1] -> [0, 1]."""
    return (x + 1.0) / 2.0


def _split_indices(n: int, split: str) -> List[int]:
    if split == "all":
        return list(range(n))
    n_train = round(0.8 * n)
    n_val = round(0.1 * n)
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n)}
    lo, hi = bounds[split]
    return list(range(lo, hi))


def _image_files(path: Path) -> List[Path]:
    return sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def load_paired_dir(path, split: str = "train", size: Optional[int] = None, channels: int = 3) -> PairedDataset:
    """Load ``[A|B]`` side-by-side images; A is the input, B the target.

    If ``path/<split>/`` exists it is read whole; otherwise files in ``path``
    are ordered by name and split 80/10/10.  Halves are resized to
    ``size x size`` when ``size`` is given.  Unreadable files are skipped
    with a warning and counted in ``n_skipped``.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    if split != "all" and (root / split).is_dir():
        files = _image_files(root / split)
    else:
        files = _image_files(root)
        files = [files[i] for i in _split_indices(len(files), split)]
    mode = {1: "L", 3: "RGB"}[channels]
    inputs, targets, ids = [], [], []
    skipped = 0
    for f in files:
        try:
            with Image.open(f) as im:
                im = im.convert(mode)
                im.load()
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", f, exc)
            skipped += 1
            continue
        w, h = im.size
        if w % 2:
            raise ValueError(f"{f.name}: width {w} is odd, cannot split into A|B halves")
        halves = [im.crop((0, 0, w // 2, h)), im.crop((w // 2, 0, w, h))]
        if size is not None and (w // 2, h) != (size, size):
            halves = [x.resize((size, size), Image.BICUBIC) for x in halves]
        a, b = (np.asarray(x, dtype=np.uint8).reshape(x.size[1], x.size[0], channels) for x in halves)
        inputs.append(a.transpose(2, 0, 1))
        targets.append(b.transpose(2, 0, 1))
        ids.append(f.stem)
    if skipped:
        log.warning("%d unreadable file(s) skipped in %s", skipped, root)
    if not ids:
        raise ValueError(f"no samples in {root} (split={split})")
    return PairedDataset(np.stack(inputs), np.stack(targets), ids, skipped)


def save_paired_dir(dataset: PairedDataset, out) -> List[Path]:
    """Write each pair as one ``[A|B]`` PNG named ``<id>.png``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for a, b, sid in zip(dataset.raw_inputs, dataset.raw_targets, dataset.ids):
        ab = np.concatenate([a, b], axis=2).transpose(1, 2, 0)
        img = Image.fromarray(ab[:, :, 0] if ab.shape[2] == 1 else ab)
        target = out / f"{sid}.png"
        tmp = target.with_suffix(".png.tmp")
        img.save(tmp, format="PNG")
        os.replace(tmp, target)
        written.append(target)
    return written


@dataclass(frozen=True)
class SyntheticTaskConfig:
    task: str = "invert"
    n_samples: int = 64
    size: int = 32
    seed: int = 0
    channels: int = 3
    n_blobs: int = 4

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.size < 2 or self.size & (self.size - 1):
            raise ValueError(f"size must be a power of two >= 2, got {self.size}")


def _blobs(rng: np.random.Generator, size: int, channels: int, n_blobs: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((channels, size, size))
    for c in range(channels):
        for _ in range(n_blobs):
            cy, cx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.08, 0.3)
            amp = rng.uniform(0.3, 1.0)
            img[c] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r ** 2))
    img /= max(img.max(), 1e-12)
    return img


def make_synthetic(cfg: SyntheticTaskConfig) -> PairedDataset:
    """Deterministic smooth-blob pairs for quick tests.

    ``invert``: target = 255 - input.  ``channel_swap``: channel order
    reversed.  ``edge_from_blob``: target marks where the thresholded blob
    mask changes between neighbouring pixels.
    """
    rng = np.random.default_rng(cfg.seed)
    inputs = np.empty((cfg.n_samples, cfg.channels, cfg.size, cfg.size), dtype=np.uint8)
    for i in range(cfg.n_samples):
        inputs[i] = np.round(_blobs(rng, cfg.size, cfg.channels, cfg.n_blobs) * 255).astype(np.uint8)
    if cfg.task == "invert":
        targets = 255 - inputs
    elif cfg.task == "channel_swap":
        targets = inputs[:, ::-1].copy()
    else:
        mask = inputs.mean(axis=1) > 127
        edge = np.zeros_like(mask)
        edge[:, 1:, :] |= mask[:, 1:, :] != mask[:, :-1, :]
        edge[:, :, 1:] |= mask[:, :, 1:] != mask[:, :, :-1]
        targets = np.repeat((edge * 255).astype(np.uint8)[:, None], cfg.channels, axis=1)
    ids = [f"{cfg.task}_{cfg.seed}_{i:05d}" for i in range(cfg.n_samples)]
    return PairedDataset(inputs, targets, ids)


def batches(dataset: PairedDataset, batch_size: int, epoch_seed: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle, then ``(input, target)`` float batches; the partial tail batch is dropped."""
    n = len(dataset)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng(epoch_seed).permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield dataset.arrays(order[start : start + batch_size])
