"""Model definition: residual CNN front end, GRU scan, dense head.

Parameters live in an ordered name -> float64 array mapping created by
`init_params`; the draw order (and thus the meaning of the init seed) is
the iteration order of `param_shapes`. Initialization, documented here
once: conv and dense weights are He-uniform, U(-a, a) with
a = sqrt(6 / fan_in); GRU matrices are scaled-uniform,
U(-a, a) with a = sqrt(6 / (fan_in + fan_out)); all biases and batchnorm
shifts start at zero, batchnorm gains at one, running means at zero,
running variances at one.
"""
from __future__ import annotations

import json
import dataclasses
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..errors import ConfigError, FormatError, ShapeError
from ..geometry import Mask
from . import ops


@dataclass(frozen=True)
class ModelConfig:
    input_width: int = 100
    input_height: int = 100
    stem_channels: int = 32
    stem_kernel: int = 7
    stem_stride: int = 2
    stage_channels: tuple = (32, 64, 128)
    stage_blocks: tuple = (2, 2, 2)
    stage_strides: tuple = (1, 2, 2)
    gru_hidden: int = 256
    dense_width: int = 512
    n_out: int = 1000
    lambda_reg: float = 1e-5

    def validate(self) -> None:
        if self.n_out < 1:
            raise ConfigError(f"n_out must be >= 1, got {self.n_out}")
        if self.input_width < 1 or self.input_height < 1:
            raise ConfigError("input size must be positive")
        if min(self.stem_channels, self.gru_hidden) < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ConfigError(f"stem kernel must be odd, got {self.stem_kernel}")
        if not (len(self.stage_channels) == len(self.stage_blocks)
                == len(self.stage_strides)):
            raise ConfigError("per-stage tuples must have equal lengths")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage channel counts must be >= 1")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("stage block counts must be >= 1")
        if any(s < 1 for s in self.stage_strides):
            raise ConfigError("stage strides must be >= 1")
        if self.dense_width < 0:
            raise ConfigError("dense width must be >= 0 (0 disables the layer)")
        if self.lambda_reg < 0.0:
            raise ConfigError("lambda_reg must be >= 0")

    def feature_hw(self) -> tuple[int, int]:
        """Spatial size of the final feature map under `same` padding."""
        h, w = self.input_height, self.input_width
        h = -(-h // self.stem_stride)
        w = -(-w // self.stem_stride)
        for s in self.stage_strides:
            h = -(-h // s)
            w = -(-w // s)
        return h, w

    def to_dict(self) -> dict:
        d = dict(vars(self))
        for k in ("stage_channels", "stage_blocks", "stage_strides"):
            d[k] = list(d[k])
        return d

    @staticmethod
    def from_dict(doc: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(ModelConfig)}
        for key in doc:
            if key not in known:
                raise FormatError(f"unknown key {key!r} in model config; "
                                  f"known keys: {', '.join(sorted(known))}")
        try:
            kw = dict(doc)
            for k in ("stage_channels", "stage_blocks", "stage_strides"):
                if k in kw:
                    kw[k] = tuple(int(x) for x in kw[k])
            cfg = ModelConfig(**kw)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad model config document: {e}") from e
        cfg.validate()
        return cfg


def reference_config() -> ModelConfig:
    """Default full-scale architecture (100x100 mask in, 1000 points out)."""
    return ModelConfig()


def tiny_config(n_out: int = 100) -> ModelConfig:
    """Small test architecture for 64x64 masks."""
    return ModelConfig(
        input_width=64, input_height=64,
        stem_channels=16, stem_kernel=7, stem_stride=2,
        stage_channels=(16, 16), stage_blocks=(1, 1), stage_strides=(2, 2),
        gru_hidden=32, dense_width=64, n_out=n_out,
    )


@dataclass
class ModelParams:
    """Named trainable tensors, batchnorm state, and optimizer slots."""

    params: dict
    state: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def ensure_slots(self) -> None:
        for name, p in self.params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape for every trainable tensor."""
    cfg.validate()
    shapes = {}

    def bn(prefix: str, c: int) -> None:
        shapes[f"{prefix}.gamma"] = (c,)
        shapes[f"{prefix}.beta"] = (c,)

    shapes["stem.k"] = (cfg.stem_channels, 1, cfg.stem_kernel, cfg.stem_kernel)
    bn("stem.bn", cfg.stem_channels)
    c_in = cfg.stem_channels
    for si, (c_out, blocks, stride) in enumerate(
            zip(cfg.stage_channels, cfg.stage_blocks, cfg.stage_strides)):
        for bi in range(blocks):
            s = stride if bi == 0 else 1
            p = f"s{si}.b{bi}"
            shapes[f"{p}.conv1.k"] = (c_out, c_in, 3, 3)
            bn(f"{p}.bn1", c_out)
            shapes[f"{p}.conv2.k"] = (c_out, c_out, 3, 3)
            bn(f"{p}.bn2", c_out)
            if s != 1 or c_in != c_out:
                shapes[f"{p}.short.k"] = (c_out, c_in, 1, 1)
            c_in = c_out
    d = c_in
    hd = cfg.gru_hidden
    for name in ("Wz", "Wr", "Wh"):
        shapes[f"gru.{name}"] = (hd, d)
    for name in ("Uz", "Ur", "Uh"):
        shapes[f"gru.{name}"] = (hd, hd)
    for name in ("bz", "br", "bh"):
        shapes[f"gru.{name}"] = (hd,)
    width = cfg.dense_width
    if width > 0:
        shapes["fc1.w"] = (width, hd)
        shapes["fc1.b"] = (width,)
        shapes["head.w"] = (cfg.n_out, width)
    else:
        shapes["head.w"] = (cfg.n_out, hd)
    shapes["head.b"] = (cfg.n_out,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Draw every tensor from one PCG64 stream in param_shapes order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".gamma",)):
            params[name] = np.ones(shape)
        elif name.endswith((".beta", ".b", ".bz", ".br", ".bh")):
            params[name] = np.zeros(shape)
        elif name.startswith("gru."):
            fan_in, fan_out = shape[1], shape[0]
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
        elif name.endswith(".k"):
            fan_in = int(np.prod(shape[1:]))
            a = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-a, a, size=shape)
        elif name.endswith(".w"):
            a = np.sqrt(6.0 / shape[1])
            params[name] = rng.uniform(-a, a, size=shape)
        else:
            raise ConfigError(f"no initialization rule for parameter {name!r}")
    state = {}
    for name in list(params):
        if name.endswith(".gamma"):
            prefix = name[: -len(".gamma")]
            c = params[name].shape[0]
            state[f"{prefix}.mean"] = np.zeros(c)
            state[f"{prefix}.var"] = np.ones(c)
            state[f"{prefix}.seen"] = np.zeros(1)
    mp = ModelParams(params=params, state=state)
    mp.ensure_slots()
    return mp


class Model:
    """Forward/backward orchestration over the functional ops."""

    def __init__(self, cfg: ModelConfig, mp: ModelParams):
        cfg.validate()
        self.cfg = cfg
        self.mp = mp

    # -- building blocks ------------------------------------------------

    def _bn(self, x, prefix: str, mode: str, tape: list):
        p, s = self.mp.params, self.mp.state
        y, cache, rm, rv, seen = ops.batchnorm(
            x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
            s[f"{prefix}.mean"], s[f"{prefix}.var"], float(s[f"{prefix}.seen"][0]),
            mode)
        if mode == "train":
            s[f"{prefix}.mean"] = rm
            s[f"{prefix}.var"] = rv
            s[f"{prefix}.seen"] = np.array([seen])
        tape.append(("bn", prefix, cache))
        return y

    def _conv(self, x, name: str, stride: int, tape: list):
        y, cache = ops.conv2d(x, self.mp.params[name], stride=stride, padding="same")
        tape.append(("conv", name, cache))
        return y

    def _relu(self, x, tape: list):
        y, cache = ops.activation(x, "relu")
        tape.append(("act", None, cache))
        return y

    def _block(self, x, prefix: str, stride: int, mode: str, tape: list):
        c_in = x.shape[1]
        y = self._conv(x, f"{prefix}.conv1.k", stride, tape)
        y = self._bn(y, f"{prefix}.bn1", mode, tape)
        y = self._relu(y, tape)
        y = self._conv(y, f"{prefix}.conv2.k", 1, tape)
        y = self._bn(y, f"{prefix}.bn2", mode, tape)
        short_name = f"{prefix}.short.k"
        if short_name in self.mp.params:
            short, s_cache = ops.conv2d(x, self.mp.params[short_name],
                                        stride=stride, padding="same")
            tape.append(("block_add_proj", short_name, s_cache))
        else:
            if stride != 1 or self.mp.params[f"{prefix}.conv1.k"].shape[1] != c_in:
                raise ShapeError(f"block {prefix} needs a projection shortcut")
            short = x
            tape.append(("block_add_id", None, None))
        out = y + short
        return self._relu(out, tape)

    # -- full network ---------------------------------------------------

    def forward_batch(self, x: np.ndarray, mode: str = "infer", taps=None):
        """x [N,H,W] in {0,1} -> (predictions [N,n_out], tape).

        When ``taps`` is a dict it is filled with the named intermediate
        feature maps ("input", "stem", "s0.b0", ...) of this pass."""
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != cfg.input_height or x.shape[2] != cfg.input_width:
            raise ShapeError(
                f"input batch {x.shape} does not match configured"
                f" {cfg.input_height}x{cfg.input_width}")
        if mode not in ("train", "infer"):
            raise ShapeError(f"mode must be 'train' or 'infer', got {mode!r}")
        tape: list = []
        y = x[:, None, :, :]
        if taps is not None:
            taps["input"] = y
        y = self._conv(y, "stem.k", cfg.stem_stride, tape)
        y = self._bn(y, "stem.bn", mode, tape)
        y = self._relu(y, tape)
        if taps is not None:
            taps["stem"] = y
        for si, (blocks, stride) in enumerate(zip(cfg.stage_blocks, cfg.stage_strides)):
            for bi in range(blocks):
                y = self._block(y, f"s{si}.b{bi}", stride if bi == 0 else 1, mode, tape)
                if taps is not None:
                    taps[f"s{si}.b{bi}"] = y
        n, c, h, w = y.shape
        # row-major scan: step t = i*w + j reads feature column (i, j)
        seq = y.transpose(2, 3, 0, 1).reshape(h * w, n, c)
        tape.append(("to_seq", None, (n, c, h, w)))
        gru_p = {k: self.mp.params[f"gru.{k}"] for k in ops.GRU_PARAM_NAMES}
        h0 = np.zeros((n, cfg.gru_hidden))
        hs, g_cache = ops.gru_layer(seq, gru_p, h0)
        tape.append(("gru", None, (g_cache, hs.shape)))
        y = hs[-1]
        if cfg.dense_width > 0:
            y, cache = ops.dense(y, self.mp.params["fc1.w"], self.mp.params["fc1.b"])
            tape.append(("dense", "fc1", cache))
            y = self._relu(y, tape)
        y, cache = ops.dense(y, self.mp.params["head.w"], self.mp.params["head.b"])
        tape.append(("dense", "head", cache))
        y, cache = ops.activation(y, "sigmoid")
        tape.append(("act", None, cache))
        if not np.isfinite(y).all():
            raise ShapeError("non-finite values in the forward pass")
        return y, tape

    def backward_batch(self, tape: list, gpred: np.ndarray) -> dict:
        """Walk the tape in reverse; returns name -> gradient for every
        trainable tensor (zeros where the batch produced no gradient)."""
        grads = {name: np.zeros_like(p) for name, p in self.mp.params.items()}
        g = np.asarray(gpred, dtype=np.float64)
        i = len(tape) - 1
        while i >= 0:
            kind, name, cache = tape[i]
            if kind == "act":
                g = ops.activation_backward(cache, g)
            elif kind == "dense":
                g, dw, db = ops.dense_backward(cache, g)
                grads[f"{name}.w"] += dw
                grads[f"{name}.b"] += db
            elif kind == "gru":
                g_cache, hs_shape = cache
                ghs = np.zeros(hs_shape)
                ghs[-1] = g
                g, dparams, _ = ops.gru_backward(g_cache, ghs)
                for k, dv in dparams.items():
                    grads[f"gru.{k}"] += dv
            elif kind == "to_seq":
                n, c, h, w = cache
                g = g.reshape(h, w, n, c).transpose(2, 3, 0, 1)
            elif kind == "bn":
                g, dgamma, dbeta = ops.batchnorm_backward(cache, g)
                grads[f"{name}.gamma"] += dgamma
                grads[f"{name}.beta"] += dbeta
            elif kind == "conv":
                g, dk = ops.conv2d_backward(cache, g)
                grads[name] += dk
            elif kind in ("block_add_id", "block_add_proj"):
                # the relu above the add was already unwound into g; the
                # main path continues upward, the shortcut branch forks here
                if kind == "block_add_proj":
                    g_short, dk = ops.conv2d_backward(cache, g)
                    grads[name] += dk
                else:
                    g_short = g
                # unwind the main path (bn2..conv1) before merging branches
                g_main = g
                j = i - 1
                depth = 0
                while True:
                    k2, n2, c2 = tape[j]
                    if k2 == "bn":
                        g_main, dgamma, dbeta = ops.batchnorm_backward(c2, g_main)
                        grads[f"{n2}.gamma"] += dgamma
                        grads[f"{n2}.beta"] += dbeta
                    elif k2 == "conv":
                        g_main, dk = ops.conv2d_backward(c2, g_main)
                        grads[n2] += dk
                        depth += 1
                        if depth == 2:
                            break
                    elif k2 == "act":
                        g_main = ops.activation_backward(c2, g_main)
                    else:
                        raise ShapeError("malformed tape inside a residual block")
                    j -= 1
                g = g_main + g_short
                i = j
            else:
                raise ShapeError(f"unknown tape entry {kind!r}")
            i -= 1
        return grads

    # -- convenience ----------------------------------------------------

    def predict(self, mask_bits: np.ndarray) -> np.ndarray:
        """Infer-mode prediction for one mask [H,W]; returns [n_out]."""
        y, _ = self.forward_batch(np.asarray(mask_bits)[None], mode="infer")
        return y[0]


def model_forward(mask: Mask, mp: ModelParams, cfg: ModelConfig,
                  mode: str = "infer") -> np.ndarray:
    """Predicted spectrum (n_out values in (0,1)) for one mask."""
    if mask.width != cfg.input_width or mask.height != cfg.input_height:
        raise ShapeError(
            f"mask {mask.width}x{mask.height} does not match configured"
            f" {cfg.input_width}x{cfg.input_height}")
    y, _ = Model(cfg, mp).forward_batch(mask.bits[None], mode=mode)
    return y[0]
