"""Differentiable array operations with hand-written backward passes.

Every op is a pure function returning (output, cache); the paired
`*_backward(cache, grad_out)` returns exact gradients of a downstream
scalar with respect to the op's inputs. All arithmetic is float64, and
accumulations are single numpy reductions in fixed order, so results do
not depend on thread count.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError, TrainingError


def _as_f64(x: np.ndarray, name: str, ndim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dims, got shape {x.shape}")
    return x


# ----------------------------------------------------------------- conv2d

def _conv_pads(h: int, w: int, kh: int, kw: int, stride: int,
               padding: str) -> tuple[int, int, int, int, int, int]:
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        return ho, wo, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2
    if padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"valid conv needs input >= kernel, got {(h, w)} vs {(kh, kw)}")
        return (h - kh) // stride + 1, (w - kw) // stride + 1, 0, 0, 0, 0
    raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, stride * s2, stride * s3))
    return win.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: np.ndarray, k: np.ndarray, stride: int = 1,
           padding: str = "same") -> tuple[np.ndarray, tuple]:
    """Cross-correlation of x [N,C,H,W] with kernels k [F,C,kh,kw]."""
    x = _as_f64(x, "conv input", 4)
    k = _as_f64(k, "conv kernel", 4)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    f, ck, kh, kw = k.shape
    if ck != c:
        raise ShapeError(f"kernel {k.shape} does not match input channels of {x.shape}")
    ho, wo, pt, pb, pl, pr = _conv_pads(h, w, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    y = np.matmul(k.reshape(f, c * kh * kw)[None], cols).reshape(n, f, ho, wo)
    cache = (cols, k, xp.shape, stride, (pt, pl), (ho, wo), x.shape)
    return y, cache


def conv2d_backward(cache: tuple, gy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dx, dk)."""
    cols, k, xp_shape, stride, (pt, pl), (ho, wo), x_shape = cache
    f, c, kh, kw = k.shape
    n, _, h, w = x_shape
    g2 = np.asarray(gy, dtype=np.float64).reshape(n, f, ho * wo)
    kmat = k.reshape(f, c * kh * kw)
    dk = np.einsum("nfp,nkp->fk", g2, cols, optimize=True).reshape(k.shape)
    dcols = np.matmul(kmat.T[None], g2)
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    return dxp[:, :, pt:pt + h, pl:pl + w], dk


# -------------------------------------------------------------- batchnorm

def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
              running_mean: np.ndarray, running_var: np.ndarray,
              seen: float, mode: str, momentum: float = 0.1,
              eps: float = 1e-5):
    """Per-channel normalization over (N,H,W) of an NCHW tensor.

    Returns (y, cache, new_running_mean, new_running_var, new_seen).
    Train mode normalizes with batch statistics (biased variance) and moves
    the running stats by `momentum` toward them; infer mode uses the
    running stats and requires at least one prior train-mode call.
    """
    x = _as_f64(x, "batchnorm input", 4)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm scale/shift need shape ({c},), got {gamma.shape}/{beta.shape}")
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_rm = (1.0 - momentum) * running_mean + momentum * mu
        new_rv = (1.0 - momentum) * running_var + momentum * var
        new_seen = seen + 1.0
    elif mode == "infer":
        if seen < 1.0:
            raise TrainingError(
                "batchnorm inference requested before any train-mode batch"
                " initialized the running statistics")
        mu, var = running_mean, running_var
        new_rm, new_rv, new_seen = running_mean, running_var, seen
    else:
        raise ShapeError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma, mode)
    return y, cache, new_rm, new_rv, new_seen


def batchnorm_backward(cache: tuple, gy: np.ndarray):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma, mode = cache
    gy = np.asarray(gy, dtype=np.float64)
    dgamma = (gy * xhat).sum(axis=(0, 2, 3))
    dbeta = gy.sum(axis=(0, 2, 3))
    dxhat = gy * gamma[None, :, None, None]
    if mode == "infer":
        dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta
    n = gy.shape[0] * gy.shape[2] * gy.shape[3]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = (inv_std[None, :, None, None] / n) * (
        n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


# ------------------------------------------------------------ activations

def activation(x: np.ndarray, kind: str) -> tuple[np.ndarray, tuple]:
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        y = np.maximum(x, 0.0)
    elif kind == "sigmoid":
        y = 1.0 / (1.0 + np.exp(-x))
    elif kind == "tanh":
        y = np.tanh(x)
    else:
        raise ShapeError(f"unknown activation {kind!r}")
    return y, (y, kind)


def activation_backward(cache: tuple, gy: np.ndarray) -> np.ndarray:
    y, kind = cache
    gy = np.asarray(gy, dtype=np.float64)
    if kind == "relu":
        return gy * (y > 0.0)
    if kind == "sigmoid":
        return gy * y * (1.0 - y)
    return gy * (1.0 - y * y)


# ------------------------------------------------------------------ pools

def pool(x: np.ndarray, kind: str) -> tuple[np.ndarray, tuple]:
    x = _as_f64(x, "pool input", 4)
    n, c, h, w = x.shape
    if kind == "max2x2":
        if h % 2 or w % 2:
            raise ShapeError(f"max2x2 needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = win.reshape(n, c, h // 2, w // 2, 4)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, ("max2x2", arg, x.shape)
    if kind == "global_avg":
        return x.mean(axis=(2, 3)), ("global_avg", None, x.shape)
    raise ShapeError(f"unknown pool kind {kind!r}")


def pool_backward(cache: tuple, gy: np.ndarray) -> np.ndarray:
    kind, arg, x_shape = cache
    gy = np.asarray(gy, dtype=np.float64)
    n, c, h, w = x_shape
    if kind == "max2x2":
        dflat = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(dflat, arg[..., None], gy[..., None], axis=-1)
        dwin = dflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dwin.reshape(n, c, h, w)
    return np.broadcast_to(gy[:, :, None, None] / (h * w), x_shape).copy()


# ------------------------------------------------------------------ dense

def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, tuple]:
    """x [N,Din] @ w [Dout,Din]^T + b [Dout]."""
    x = _as_f64(x, "dense input", 2)
    w = _as_f64(w, "dense weight", 2)
    if x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"dense shapes disagree: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w.T + b, (x, w)


def dense_backward(cache: tuple, gy: np.ndarray):
    """Returns (dx, dw, db)."""
    x, w = cache
    gy = np.asarray(gy, dtype=np.float64)
    return gy @ w, gy.T @ x, gy.sum(axis=0)


# -------------------------------------------------------------------- gru

GRU_PARAM_NAMES = ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")


def gru_layer(seq: np.ndarray, params: dict, h0: np.ndarray):
    """Scan a GRU over seq [T,N,D] from h0 [N,H]; returns (hs [T,N,H], cache).

    Gate convention (normative for this repo):
        z_t = sigmoid(Wz x_t + Uz h_prev + bz)
        r_t = sigmoid(Wr x_t + Ur h_prev + br)
        c_t = tanh(Wh x_t + Uh (r_t * h_prev) + bh)
        h_t = (1 - z_t) * h_prev + z_t * c_t
    so z gates the new candidate state.
    """
    seq = _as_f64(seq, "gru sequence", 3)
    h0 = _as_f64(h0, "gru initial state", 2)
    t_len, n, d = seq.shape
    hd = h0.shape[1]
    for name in GRU_PARAM_NAMES:
        if name not in params:
            raise ShapeError(f"gru params missing {name!r}")
    if params["Wz"].shape != (hd, d) or params["Uz"].shape != (hd, hd):
        raise ShapeError(
            f"gru weight shapes {params['Wz'].shape}/{params['Uz'].shape} do not"
            f" match input dim {d} and hidden dim {hd}")
    hs = np.zeros((t_len, n, hd))
    steps = []
    h = h0
    for t in range(t_len):
        x = seq[t]
        z = 1.0 / (1.0 + np.exp(-(x @ params["Wz"].T + h @ params["Uz"].T + params["bz"])))
        r = 1.0 / (1.0 + np.exp(-(x @ params["Wr"].T + h @ params["Ur"].T + params["br"])))
        rh = r * h
        c = np.tanh(x @ params["Wh"].T + rh @ params["Uh"].T + params["bh"])
        h_new = (1.0 - z) * h + z * c
        steps.append((x, h, z, r, rh, c))
        hs[t] = h_new
        h = h_new
    return hs, (steps, params, h0.shape)


def gru_backward(cache: tuple, ghs: np.ndarray):
    """Backward through time. ghs [T,N,H] holds the gradient w.r.t. every
    emitted hidden state; returns (dseq [T,N,D], dparams, dh0)."""
    steps, params, h0_shape = cache
    t_len = len(steps)
    ghs = np.asarray(ghs, dtype=np.float64)
    dparams = {k: np.zeros_like(params[k]) for k in GRU_PARAM_NAMES}
    dseq = np.zeros((t_len, ghs.shape[1], params["Wz"].shape[1]))
    dh = np.zeros(h0_shape)
    for t in range(t_len - 1, -1, -1):
        x, h_prev, z, r, rh, c = steps[t]
        dh = dh + ghs[t]
        dc = dh * z
        dz = dh * (c - h_prev)
        dh_prev = dh * (1.0 - z)
        dac = dc * (1.0 - c * c)
        dparams["Wh"] += dac.T @ x
        dparams["Uh"] += dac.T @ rh
        dparams["bh"] += dac.sum(axis=0)
        dx = dac @ params["Wh"]
        drh = dac @ params["Uh"]
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r
        dar = dr * r * (1.0 - r)
        dparams["Wr"] += dar.T @ x
        dparams["Ur"] += dar.T @ h_prev
        dparams["br"] += dar.sum(axis=0)
        dx = dx + dar @ params["Wr"]
        dh_prev = dh_prev + dar @ params["Ur"]
        daz = dz * z * (1.0 - z)
        dparams["Wz"] += daz.T @ x
        dparams["Uz"] += daz.T @ h_prev
        dparams["bz"] += daz.sum(axis=0)
        dx = dx + daz @ params["Wz"]
        dh_prev = dh_prev + daz @ params["Uz"]
        dseq[t] = dx
        dh = dh_prev
    return dseq, dparams, dh


# ------------------------------------------------------------------- loss

def mse_loss(y: np.ndarray, p: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements; returns (loss, dL/dp)."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"loss operands differ in shape: {y.shape} vs {p.shape}")
    if y.size < 1:
        raise ShapeError("loss needs at least one element")
    diff = p - y
    return float((diff * diff).mean()), 2.0 * diff / y.size
