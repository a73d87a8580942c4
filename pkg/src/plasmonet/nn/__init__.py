"""From-scratch neural stack: ops, model assembly, optimizer, checkpoints."""

from .ops import (
    activation,
    activation_backward,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    dense,
    dense_backward,
    gru_backward,
    gru_layer,
    mse_loss,
    pool,
    pool_backward,
)
from .model import (
    Model,
    ModelConfig,
    ModelParams,
    count_params,
    init_params,
    model_forward,
    param_shapes,
    reference_config,
    tiny_config,
)
from .optim import TrainConfig, nadam_step
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Model",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "activation",
    "activation_backward",
    "batchnorm",
    "batchnorm_backward",
    "conv2d",
    "conv2d_backward",
    "count_params",
    "dense",
    "dense_backward",
    "gru_backward",
    "gru_layer",
    "init_params",
    "load_checkpoint",
    "mse_loss",
    "model_forward",
    "nadam_step",
    "param_shapes",
    "pool",
    "pool_backward",
    "reference_config",
    "save_checkpoint",
    "tiny_config",
]
