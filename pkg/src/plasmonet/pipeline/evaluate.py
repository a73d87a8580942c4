"""Inference-mode metrics over dataset splits.

The generalization yardstick is the per-frequency mean predictor: a
constant "model" that always emits the training split's mean spectrum.
Its MSE on a split is the mean (over samples and frequencies) of the
squared deviation from that training mean, and a learned model is only
interesting insofar as it beats it.  The baseline is always computed
from the training split, regardless of which split is being scored.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Union

import numpy as np

from ..errors import ConfigError, DatasetError
from ..nn import Model, load_checkpoint
from .records import SPLITS, DatasetManifest, load_samples


@dataclass
class SplitMetrics:
    n: int
    mse: float
    per_sample_min: float
    per_sample_median: float
    per_sample_max: float
    baseline_mse: float


@dataclass
class MetricsReport:
    splits: dict
    seconds: float

    def to_dict(self) -> dict:
        return {"splits": {k: asdict(v) for k, v in self.splits.items()},
                "seconds": self.seconds}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def split_metrics(pred: np.ndarray, targets: np.ndarray,
                  baseline_spectrum: np.ndarray) -> SplitMetrics:
    """Score a block of predictions against targets; the baseline column
    scores the constant ``baseline_spectrum`` on the same targets."""
    if pred.shape != targets.shape:
        raise ConfigError(f"predictions {pred.shape} vs targets "
                          f"{targets.shape} shape mismatch")
    per_sample = ((pred - targets) ** 2).mean(axis=1)
    base = float(((targets - baseline_spectrum[None, :]) ** 2).mean())
    return SplitMetrics(n=int(targets.shape[0]),
                        mse=float(per_sample.mean()),
                        per_sample_min=float(per_sample.min()),
                        per_sample_median=float(np.median(per_sample)),
                        per_sample_max=float(per_sample.max()),
                        baseline_mse=base)


def _predict_block(model: Model, x: np.ndarray, batch: int) -> np.ndarray:
    out = []
    for b0 in range(0, x.shape[0], batch):
        pred, _ = model.forward_batch(x[b0:b0 + batch], mode="infer")
        out.append(pred)
    return np.concatenate(out, axis=0)


def evaluate(checkpoint_path: str,
             manifest_path: str,
             splits: Union[str, tuple] = ("train", "test", "val"),
             batch_size: int = 64) -> MetricsReport:
    """Score a trained checkpoint on the named dataset splits."""
    t0 = time.monotonic()
    if isinstance(splits, str):
        splits = (splits,)
    for name in splits:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}; expected one of {SPLITS}")
    if not splits:
        raise DatasetError("no splits requested")

    cfg, mp, _ = load_checkpoint(checkpoint_path)
    manifest = DatasetManifest.load(manifest_path)
    if not manifest.is_split:
        raise DatasetError("manifest has no train/test/val split; split it first")
    if (cfg.input_height, cfg.input_width) != (manifest.mask_height,
                                               manifest.mask_width):
        raise ConfigError(f"checkpoint expects {cfg.input_height}x"
                          f"{cfg.input_width} masks but the dataset holds "
                          f"{manifest.mask_height}x{manifest.mask_width}")
    if cfg.n_out != manifest.grid.n_points:
        raise ConfigError(f"checkpoint emits {cfg.n_out} points but the "
                          f"dataset spectra have {manifest.grid.n_points}")

    train_ids = manifest.ids_for("train")
    if not train_ids:
        raise DatasetError("train split is empty; the baseline needs it")
    _, _, spectra_train = load_samples(manifest_path, ids=train_ids)
    baseline_spectrum = spectra_train.mean(axis=0)

    model = Model(cfg, mp)
    report: dict = {}
    for name in splits:
        ids = manifest.ids_for(name)
        if not ids:
            raise DatasetError(f"split {name!r} is empty")
        _, masks, spectra = load_samples(manifest_path, ids=ids)
        pred = _predict_block(model, masks.astype(np.float64), batch_size)
        report[name] = split_metrics(pred, spectra, baseline_spectrum)
    return MetricsReport(splits=report, seconds=time.monotonic() - t0)
