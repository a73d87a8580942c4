"""Nadam parameter updates.

The update applied to every tensor, with t the step counter before the
call (g already includes the L2 term g + l2*theta):

    t <- t + 1
    m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
    mhat = m / (1 - b1^(t+1))     ghat = g / (1 - b1^t)
    vhat = v / (1 - b2^t)
    theta <- theta - lr * (b1*mhat + (1-b1)*ghat) / (sqrt(vhat) + eps)

This exact form is what the tests pin down; do not swap in a plain Adam
step or fold the Nesterov term differently.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, TrainingError
from .model import ModelParams


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 100
    shuffle_seed: int = 0
    init_seed: int = 0
    l2: float = 1e-5
    checkpoint_interval: int = 10
    # stop once the epoch train MSE drops below this value (0 disables)
    stop_below_train_mse: float = 0.0
    # also keep the best-test-MSE weights in a separate "<checkpoint>.best" file
    select_best: bool = False

    def validate(self) -> None:
        if self.lr < 0.0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in (0,1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.l2 < 0.0:
            raise ConfigError(f"l2 must be >= 0, got {self.l2}")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint interval must be >= 1")
        if self.stop_below_train_mse < 0.0:
            raise ConfigError("stop_below_train_mse must be >= 0")

    def to_dict(self) -> dict:
        return dict(vars(self))

    @staticmethod
    def from_dict(doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in train config; "
                                  f"known keys: {', '.join(sorted(known))}")
        try:
            cfg = TrainConfig(**doc)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad train config document: {e}") from e
        cfg.validate()
        return cfg


def nadam_step(mp: ModelParams, grads: dict, cfg: TrainConfig) -> None:
    """One in-place update of every parameter tensor from its gradient."""
    cfg.validate()
    mp.ensure_slots()
    for name in mp.params:
        if name not in grads:
            raise TrainingError(f"gradient missing for parameter {name!r}")
        if not np.isfinite(grads[name]).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    t = mp.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc_m = 1.0 - b1 ** (t + 1)
    bc_g = 1.0 - b1 ** t
    bc_v = 1.0 - b2 ** t
    for name, theta in mp.params.items():
        g = grads[name]
        if cfg.l2 > 0.0:
            g = g + cfg.l2 * theta
        m = mp.m[name]
        v = mp.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (b1 * (m / bc_m) + (1.0 - b1) * (g / bc_g)) / (np.sqrt(v / bc_v) + cfg.eps)
        theta -= cfg.lr * step
    mp.t = t
