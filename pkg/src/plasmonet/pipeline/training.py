"""Minibatch training loop over a split dataset.

Contract highlights:
  * The epoch shuffle is drawn once from ``shuffle_seed`` and the same
    permutation is reused every epoch.  This keeps batch composition —
    and therefore the batch statistics that normalization layers see —
    fixed across epochs, so a frozen model (lr=0) logs a bit-identical
    train MSE for every epoch and stopping/resuming cannot change which
    samples share a batch.
  * The logged train MSE is the sample-weighted mean of the minibatch
    training losses of that epoch (batch-statistics mode); the test MSE
    is a full inference-mode pass over the test split after the epoch.
  * Spectra are clamped to [1e-6, 1-1e-6] before being used as targets,
    since the network's sigmoid output can never reach 0 or 1 exactly.
  * The checkpoint at ``out_checkpoint`` is rolling: it is rewritten
    (atomically) every ``checkpoint_interval`` epochs and at the end,
    and carries the epoch counter plus the shuffle RNG state, so a run
    resumed from it reproduces the uninterrupted run bit-exactly.
  * A non-finite loss or gradient aborts the run *before* the bad update
    is applied or checkpointed, so the file on disk stays last-good.
  * With ``select_best`` the best-test-MSE weights seen so far are
    additionally kept in ``<out_checkpoint>.best``; the rolling file
    always holds the latest epoch (final-epoch weights are the default
    deliverable).
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigError, DatasetError, TrainingError
from ..nn import (Model, ModelConfig, ModelParams, TrainConfig, init_params,
                  load_checkpoint, mse_loss, nadam_step, save_checkpoint)
from .records import DatasetManifest, load_samples

TARGET_CLAMP = (1e-6, 1.0 - 1e-6)

LOG_HEADER = "epoch,train_mse,test_mse,seconds"


@dataclass
class TrainResult:
    epochs_run: int
    final_train_mse: float
    final_test_mse: float
    checkpoint_path: str
    log_path: str
    seconds: float


def _rng_state_tensor(rng: np.random.Generator) -> np.ndarray:
    text = json.dumps(rng.bit_generator.state, sort_keys=True)
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _atomic_save(path: str, cfg: ModelConfig, mp: ModelParams, extra: dict) -> None:
    tmp = path + ".tmp"
    save_checkpoint(tmp, cfg, mp, extra=extra)
    os.replace(tmp, path)


def _eval_mse(model: Model, x: np.ndarray, y: np.ndarray, batch: int) -> float:
    """Inference-mode mean squared error over a whole array pair."""
    total = 0.0
    for b0 in range(0, x.shape[0], batch):
        pred, _ = model.forward_batch(x[b0:b0 + batch], mode="infer")
        diff = pred - y[b0:b0 + batch]
        total += float((diff * diff).sum())
    return total / y.size


def _trim_log(log_path: str, keep_up_to: int) -> None:
    """Drop any log rows past ``keep_up_to`` so a resumed run can append
    its own rows without duplicating epochs (covers a crash that hit
    after the checkpoint write but before the log write, or vice versa)."""
    if not os.path.exists(log_path):
        raise TrainingError(f"cannot resume: missing epoch log {log_path!r}")
    with open(log_path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise TrainingError(f"cannot resume: {log_path!r} is not an epoch log")
    kept = [lines[0]]
    for line in lines[1:]:
        if not line:
            continue
        try:
            epoch = int(line.split(",", 1)[0])
        except ValueError as e:
            raise TrainingError(f"cannot resume: bad log row {line!r}") from e
        if epoch <= keep_up_to:
            kept.append(line)
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(kept) + "\n")


def train(manifest_path: str,
          model_cfg: Optional[ModelConfig] = None,
          train_cfg: Optional[TrainConfig] = None,
          out_checkpoint: str = "model.ckpt",
          log_path: str = "train_log.csv",
          resume: bool = False,
          progress: bool = False) -> TrainResult:
    """Train a model on the manifest's train split; returns a summary.

    ``resume=True`` continues from ``out_checkpoint`` (its stored config
    wins; passing a conflicting ``model_cfg`` is an error) until
    ``train_cfg.epochs`` total epochs have run.
    """
    t_start = time.monotonic()
    train_cfg = train_cfg if train_cfg is not None else TrainConfig()
    train_cfg.validate()

    manifest = DatasetManifest.load(manifest_path)
    if not manifest.is_split:
        raise DatasetError("manifest has no train/test/val split; split it first")
    train_ids = manifest.ids_for("train")
    if not train_ids:
        raise DatasetError("train split is empty")
    test_ids = manifest.ids_for("test")

    _, masks_tr, spectra_tr = load_samples(manifest_path, ids=train_ids)
    x_train = masks_tr.astype(np.float64)
    y_train = np.clip(spectra_tr, TARGET_CLAMP[0], TARGET_CLAMP[1])
    if test_ids:
        _, masks_te, spectra_te = load_samples(manifest_path, ids=test_ids)
        x_test = masks_te.astype(np.float64)
        y_test = np.clip(spectra_te, TARGET_CLAMP[0], TARGET_CLAMP[1])
    else:
        x_test = y_test = None

    # --- model / resume state ---------------------------------------
    start_epoch = 0
    best_mse = math.nan
    if resume:
        cfg_ck, mp, extra = load_checkpoint(out_checkpoint)
        if model_cfg is not None and model_cfg != cfg_ck:
            raise ConfigError("resume config does not match the checkpoint; "
                              "omit model_cfg or pass the stored one")
        model_cfg = cfg_ck
        if "train.epoch" not in extra:
            raise TrainingError(f"{out_checkpoint!r} was not written by the "
                                "training loop (no epoch counter); cannot resume")
        start_epoch = int(extra["train.epoch"][0])
        if "train.best_mse" in extra:
            best_mse = float(extra["train.best_mse"][0])
        _trim_log(log_path, start_epoch)
    else:
        model_cfg = model_cfg if model_cfg is not None else ModelConfig()
        model_cfg.validate()
        mp = init_params(model_cfg, seed=train_cfg.init_seed)
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write(LOG_HEADER + "\n")

    h, w = x_train.shape[1], x_train.shape[2]
    if (model_cfg.input_height, model_cfg.input_width) != (h, w):
        raise ConfigError(f"model expects {model_cfg.input_height}x"
                          f"{model_cfg.input_width} masks but the dataset "
                          f"holds {h}x{w}")
    if model_cfg.n_out != manifest.grid.n_points:
        raise ConfigError(f"model emits {model_cfg.n_out} points but the "
                          f"dataset spectra have {manifest.grid.n_points}")

    model = Model(model_cfg, mp)
    n = x_train.shape[0]
    rng = np.random.default_rng(train_cfg.shuffle_seed)
    perm = rng.permutation(n)
    rng_tensor = _rng_state_tensor(rng)
    # the optimizer reads its own l2; the model config carries the same
    # coefficient, so a disagreement is almost certainly a mistake
    if model_cfg.lambda_reg != train_cfg.l2:
        raise ConfigError(f"model lambda_reg={model_cfg.lambda_reg} and "
                          f"optimizer l2={train_cfg.l2} disagree; set them "
                          "to the same value")

    def write_checkpoint(epoch: int) -> None:
        extra = {"train.epoch": np.array([float(epoch)]),
                 "train.best_mse": np.array([best_mse]),
                 "train.rng": rng_tensor}
        _atomic_save(out_checkpoint, model_cfg, mp, extra)

    epochs_run = start_epoch
    train_mse = math.nan
    test_mse = math.nan
    saved_at = start_epoch if resume else -1
    for epoch in range(start_epoch + 1, train_cfg.epochs + 1):
        t_epoch = time.monotonic()
        sq_sum = 0.0
        for b0 in range(0, n, train_cfg.batch_size):
            idx = perm[b0:b0 + train_cfg.batch_size]
            pred, tape = model.forward_batch(x_train[idx], mode="train")
            loss, gpred = mse_loss(y_train[idx], pred)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}; "
                                    "last-good checkpoint retained")
            sq_sum += loss * (idx.size * model_cfg.n_out)
            grads = model.backward_batch(tape, gpred)
            nadam_step(mp, grads, train_cfg)
        train_mse = sq_sum / (n * model_cfg.n_out)
        test_mse = (_eval_mse(model, x_test, y_test, train_cfg.batch_size)
                    if x_test is not None else math.nan)
        epochs_run = epoch

        if math.isfinite(test_mse) and not (best_mse <= test_mse):
            best_mse = test_mse
            if train_cfg.select_best:
                extra = {"train.epoch": np.array([float(epoch)]),
                         "train.best_mse": np.array([best_mse]),
                         "train.rng": rng_tensor}
                _atomic_save(out_checkpoint + ".best", model_cfg, mp, extra)

        stop = (train_cfg.stop_below_train_mse > 0.0
                and train_mse < train_cfg.stop_below_train_mse)
        if epoch % train_cfg.checkpoint_interval == 0 or epoch == train_cfg.epochs or stop:
            write_checkpoint(epoch)
            saved_at = epoch
        seconds = time.monotonic() - t_epoch
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(f"{epoch},{train_mse!r},{test_mse!r},{seconds:.3f}\n")
        if progress:
            print(f"epoch {epoch}/{train_cfg.epochs} train={train_mse:.3e} "
                  f"test={test_mse:.3e} ({seconds:.1f} s)", flush=True)
        if stop:
            break

    if epochs_run > saved_at:
        write_checkpoint(epochs_run)
    elif epochs_run == start_epoch and not os.path.exists(out_checkpoint):
        write_checkpoint(epochs_run)      # zero-epoch run still yields a file

    return TrainResult(epochs_run=epochs_run,
                       final_train_mse=train_mse,
                       final_test_mse=test_mse,
                       checkpoint_path=out_checkpoint,
                       log_path=log_path,
                       seconds=time.monotonic() - t_start)
