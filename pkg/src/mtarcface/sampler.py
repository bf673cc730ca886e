"""Image selector feeding training batches from an original/masked twin pair.

Both datasets are indexed through one shared per-epoch permutation, so slot
``i`` always refers to the same underlying face in either tree.  Whether a slot
is served from the masked tree is an independent Bernoulli draw keyed by
``(seed, step, slot)``.  The stream is a pure function of the config and the
step number, so a checkpoint only needs ``(seed, step)`` to resume it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import DatasetManifest, SampleRecord, validate_twins

_PERMUTATION_TAG = 0x5E1
_SELECTOR_TAG = 0xB17


@dataclass(frozen=True)
class SamplerConfig:
    seed: int
    batch_size: int
    epoch_length: int
    masked_probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.masked_probability <= 1.0:
            raise ValueError(f"masked_probability must be in [0, 1], got {self.masked_probability}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epoch_length < 1:
            raise ValueError("epoch_length must be >= 1")


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([_PERMUTATION_TAG, int(seed), int(epoch)]))
    return rng.permutation(n)


def mask_choices(seed: int, step: int, batch_size: int, p: float) -> np.ndarray:
    """Bernoulli(p) masked/unmasked choice for each slot of batch ``step``."""
    rng = np.random.default_rng(np.random.SeedSequence([_SELECTOR_TAG, int(seed), int(step)]))
    return (rng.random(batch_size) < p).astype(np.int64)


def batch_plan(cfg: SamplerConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Global image indices and mask flags for batch ``step``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    n, b = cfg.epoch_length, cfg.batch_size
    positions = step * b + np.arange(b)
    epochs = positions // n
    indices = np.empty(b, dtype=np.int64)
    for epoch in np.unique(epochs):
        sel = epochs == epoch
        indices[sel] = epoch_permutation(cfg.seed, int(epoch), n)[positions[sel] % n]
    return indices, mask_choices(cfg.seed, step, b, cfg.masked_probability)


def next_batch(cfg: SamplerConfig, step: int, original: DatasetManifest,
               masked: DatasetManifest) -> list[SampleRecord]:
    validate_twins(original, masked)
    if cfg.epoch_length != original.num_images:
        raise ValueError(f"epoch_length {cfg.epoch_length} != dataset size {original.num_images}")
    indices, flags = batch_plan(cfg, step)
    records = []
    for index, flag in zip(indices.tolist(), flags.tolist()):
        source = masked if flag else original
        records.append(SampleRecord(source.load_face(index), original.labels[index], flag))
    return records
