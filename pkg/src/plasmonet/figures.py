"""Spectrum plots (SVG) and feature-map dumps (PGM).

Everything here is byte-deterministic for fixed inputs: coordinates are
formatted with a fixed precision, nothing depends on dict order or
wall-clock, and both formats are written in binary mode, so golden-file
tests can compare raw bytes.
"""
from __future__ import annotations

import os
from typing import Iterable

import numpy as np

from .errors import ShapeError
from .geometry import Mask

# plot geometry (SVG user units)
_W, _H = 640, 480
_ML, _MR, _MT, _MB = 64, 24, 24, 56
_PW, _PH = _W - _ML - _MR, _H - _MT - _MB


def _pts(wavelengths: np.ndarray, values: np.ndarray) -> str:
    lo = float(wavelengths.min())
    hi = float(wavelengths.max())
    xs = _ML + (wavelengths - lo) / (hi - lo) * _PW
    ys = _MT + (1.0 - np.clip(values, 0.0, 1.0)) * _PH
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def plot_spectra(predicted: np.ndarray,
                 simulated: np.ndarray,
                 grid,
                 out_path: str) -> None:
    """Overlay two absorption curves against wavelength as an SVG file.

    The simulated curve is drawn solid, the predicted one dashed; the
    legend labels are the fixed strings ``simulated`` and ``predicted``.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    simulated = np.asarray(simulated, dtype=np.float64)
    if predicted.ndim != 1 or predicted.shape != simulated.shape:
        raise ShapeError(f"curve shapes differ: predicted {predicted.shape} "
                         f"vs simulated {simulated.shape}")
    wl = grid.wavelengths_nm()
    if wl.shape != predicted.shape:
        raise ShapeError(f"grid has {wl.shape[0]} points but curves have "
                         f"{predicted.shape[0]}")

    lo, hi = float(wl.min()), float(wl.max())
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<rect x="{_ML}" y="{_MT}" width="{_PW}" height="{_PH}" fill="none" '
        'stroke="black" stroke-width="1"/>',
    ]
    # y ticks: absorption 0..1
    for i in range(5):
        frac = i / 4.0
        y = _MT + (1.0 - frac) * _PH
        parts.append(f'<line x1="{_ML - 5}" y1="{y:.2f}" x2="{_ML}" '
                     f'y2="{y:.2f}" stroke="black"/>')
        parts.append(f'<text x="{_ML - 9}" y="{y + 4:.2f}" font-size="12" '
                     f'text-anchor="end" font-family="sans-serif">{frac:.2f}</text>')
    # x ticks: wavelength in nm
    for i in range(5):
        lam = lo + (hi - lo) * i / 4.0
        x = _ML + (lam - lo) / (hi - lo) * _PW
        yb = _MT + _PH
        parts.append(f'<line x1="{x:.2f}" y1="{yb}" x2="{x:.2f}" '
                     f'y2="{yb + 5}" stroke="black"/>')
        parts.append(f'<text x="{x:.2f}" y="{yb + 20}" font-size="12" '
                     f'text-anchor="middle" font-family="sans-serif">{lam:.0f}</text>')
    parts.append(f'<text x="{_ML + _PW / 2:.2f}" y="{_H - 12}" font-size="13" '
                 'text-anchor="middle" font-family="sans-serif">wavelength (nm)</text>')
    parts.append(f'<text x="16" y="{_MT + _PH / 2:.2f}" font-size="13" '
                 'text-anchor="middle" font-family="sans-serif" '
                 f'transform="rotate(-90 16 {_MT + _PH / 2:.2f})">absorption</text>')
    parts.append(f'<polyline fill="none" stroke="#1f6fb4" stroke-width="1.5" '
                 f'points="{_pts(wl, simulated)}"/>')
    parts.append(f'<polyline fill="none" stroke="#c23b22" stroke-width="1.5" '
                 f'stroke-dasharray="6 4" points="{_pts(wl, predicted)}"/>')
    # legend
    lx, ly = _ML + 12, _MT + 16
    parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 28}" y2="{ly}" '
                 'stroke="#1f6fb4" stroke-width="1.5"/>')
    parts.append(f'<text x="{lx + 34}" y="{ly + 4}" font-size="12" '
                 'font-family="sans-serif">simulated</text>')
    parts.append(f'<line x1="{lx}" y1="{ly + 18}" x2="{lx + 28}" y2="{ly + 18}" '
                 'stroke="#c23b22" stroke-width="1.5" stroke-dasharray="6 4"/>')
    parts.append(f'<text x="{lx + 34}" y="{ly + 22}" font-size="12" '
                 'font-family="sans-serif">predicted</text>')
    parts.append('</svg>')
    blob = "\n".join(parts).encode("utf-8") + b"\n"
    with open(out_path, "wb") as fh:
        fh.write(blob)


# ------------------------------------------------------------------ PGM

def _pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes()


def _normalize_channel(ch: np.ndarray) -> np.ndarray:
    lo = float(ch.min())
    hi = float(ch.max())
    if hi == lo:
        return np.zeros(ch.shape, dtype=np.uint8)
    return np.rint((ch - lo) / (hi - lo) * 255.0).astype(np.uint8)


def valid_activation_layers(cfg) -> tuple:
    names = ["input", "stem"]
    for si, blocks in enumerate(cfg.stage_blocks):
        names.extend(f"s{si}.b{bi}" for bi in range(blocks))
    return tuple(names)


def export_activations(checkpoint_path: str,
                       mask: Mask,
                       layer_names: Iterable[str],
                       out_dir: str) -> list:
    """Write one min-max normalized PGM per channel of each named layer.

    Returns the list of file paths written.  The ``input`` layer dump is
    byte-identical to the mask's own PGM export.
    """
    from .nn import Model, load_checkpoint

    cfg, mp, _ = load_checkpoint(checkpoint_path)
    layer_names = list(layer_names)
    valid = valid_activation_layers(cfg)
    for name in layer_names:
        if name not in valid:
            raise ShapeError(f"unknown layer {name!r}; valid layers: "
                             + ", ".join(valid))
    model = Model(cfg, mp)
    taps: dict = {}
    x = mask.bits.astype(np.float64)[None, :, :]
    model.forward_batch(x, mode="infer", taps=taps)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name in layer_names:
        feats = taps[name][0]              # [C,h,w]
        for c in range(feats.shape[0]):
            if name == "input":
                # identity dump in the mask's own convention (silver
                # black, empty white), so even a uniform mask reproduces
                # its PGM bytes exactly
                img = np.where(feats[c] != 0.0, 0, 255).astype(np.uint8)
            else:
                img = _normalize_channel(feats[c])
            path = os.path.join(out_dir, f"{name.replace('.', '_')}_c{c:03d}.pgm")
            with open(path, "wb") as fh:
                fh.write(_pgm_bytes(img))
            written.append(path)
    return written
