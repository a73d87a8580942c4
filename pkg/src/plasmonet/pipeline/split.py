"""Deterministic train/test/val assignment on a manifest."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, DatasetError
from .records import DatasetManifest

DEFAULT_RATIOS = (0.6, 0.3, 0.1)


def split_dataset(manifest: DatasetManifest, ratios=DEFAULT_RATIOS,
                  seed: int = 0, force: bool = False) -> DatasetManifest:
    """Tag every sample with train/test/val, in place; returns the manifest.

    Ids are shuffled with a PCG64 generator seeded from `seed`; the first
    floor(r_train*N) go to train, the next floor(r_test*N) to test, the
    remainder to val.
    """
    if len(ratios) != 3 or any(r <= 0.0 for r in ratios):
        raise ConfigError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    if manifest.is_split and not force:
        raise DatasetError("manifest is already split; pass force to reassign")
    n = len(manifest.samples)
    if n < 1:
        raise DatasetError("cannot split an empty manifest")
    order = np.random.default_rng(seed).permutation(n)
    # nudge before flooring so 0.6*N lands on N*3/5 exactly despite the
    # binary representation of the ratio sitting just under it
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_test = int(math.floor(ratios[1] * n + 1e-9))
    tags = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            tags[int(idx)] = "train"
        elif pos < n_train + n_test:
            tags[int(idx)] = "test"
        else:
            tags[int(idx)] = "val"
    for e in manifest.samples:
        e.split = tags[e.id]
    manifest.validate()
    return manifest
