"""Spectral grid and R/T/A spectrum containers with their file formats."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..constants import C0, LAMBDA_MAX_NM, LAMBDA_MIN_NM
from ..errors import ConfigError, FormatError

MONITOR_MAGIC = b"EMON1"


@dataclass(frozen=True)
class SpectralGrid:
    """Evaluation frequencies, uniform in frequency between the band edges.

    Point k sits at f_k = f_min + k*(f_max - f_min)/(n_points - 1) with
    f_min = c/lambda_max and f_max = c/lambda_min, so wavelengths run from
    lambda_max down to lambda_min along the grid.
    """

    n_points: int
    lambda_min_nm: float = LAMBDA_MIN_NM
    lambda_max_nm: float = LAMBDA_MAX_NM

    def validate(self) -> None:
        if self.n_points < 2:
            raise ConfigError(f"spectral grid needs at least 2 points, got {self.n_points}")
        if not 0.0 < self.lambda_min_nm < self.lambda_max_nm:
            raise ConfigError(
                f"need 0 < lambda_min < lambda_max, got "
                f"{self.lambda_min_nm}..{self.lambda_max_nm}"
            )

    @property
    def f_min(self) -> float:
        return C0 / (self.lambda_max_nm * 1e-9)

    @property
    def f_max(self) -> float:
        return C0 / (self.lambda_min_nm * 1e-9)

    def frequencies(self) -> np.ndarray:
        """Hz, ascending, length n_points."""
        self.validate()
        k = np.arange(self.n_points, dtype=np.float64)
        return self.f_min + k * ((self.f_max - self.f_min) / (self.n_points - 1))

    def wavelengths_nm(self) -> np.ndarray:
        """nm, aligned with frequencies(), so descending."""
        return C0 / self.frequencies() * 1e9

    def to_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "lambda_min_nm": self.lambda_min_nm,
            "lambda_max_nm": self.lambda_max_nm,
        }

    @staticmethod
    def from_dict(d: dict) -> "SpectralGrid":
        try:
            g = SpectralGrid(
                n_points=int(d["n_points"]),
                lambda_min_nm=float(d["lambda_min_nm"]),
                lambda_max_nm=float(d["lambda_max_nm"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad spectral grid document: {e}") from e
        g.validate()
        return g


@dataclass
class SpectrumTriplet:
    """Power reflection, transmission, absorption on a spectral grid.

    A is always 1 - R - T elementwise. R and T may dip slightly below zero
    or sum slightly above one from discretization noise; validate() enforces
    the tolerance band R,T >= -0.01 and R+T <= 1.02.
    """

    R: np.ndarray
    T: np.ndarray
    A: np.ndarray = field(default=None)
    converged: bool = True

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        if self.A is None:
            self.A = 1.0 - self.R - self.T
        else:
            self.A = np.asarray(self.A, dtype=np.float64)

    def validate(self) -> None:
        n = self.R.shape[0]
        if self.T.shape[0] != n or self.A.shape[0] != n:
            raise ConfigError(
                f"spectrum arrays disagree in length: {self.R.shape[0]},"
                f" {self.T.shape[0]}, {self.A.shape[0]}"
            )
        for name, arr in (("R", self.R), ("T", self.T), ("A", self.A)):
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"spectrum {name} contains non-finite values")
        if np.any(self.R < -0.01) or np.any(self.T < -0.01):
            raise ConfigError(
                f"R or T below tolerance floor: min R={self.R.min():.4g},"
                f" min T={self.T.min():.4g}"
            )
        if np.any(self.R + self.T > 1.02):
            raise ConfigError(f"R+T exceeds 1.02: max {(self.R + self.T).max():.4g}")


def spectrum_csv(spec: SpectrumTriplet, grid: SpectralGrid) -> str:
    """CSV in grid order (frequency ascending, so wavelength descending)."""
    if spec.R.shape[0] != grid.n_points:
        raise ConfigError(
            f"spectrum length {spec.R.shape[0]} does not match grid {grid.n_points}"
        )
    lines = ["lambda_nm,R,T,A"]
    for lam, r, t, a in zip(grid.wavelengths_nm(), spec.R, spec.T, spec.A):
        lines.append(f"{float(lam)!r},{float(r)!r},{float(t)!r},{float(a)!r}")
    return "\n".join(lines) + "\n"


def read_spectrum_csv(text: str) -> tuple[np.ndarray, SpectrumTriplet]:
    """Returns (wavelengths_nm, triplet) in file order."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "lambda_nm,R,T,A":
        raise FormatError("spectrum CSV must start with header 'lambda_nm,R,T,A'")
    lam, R, T, A = [], [], [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 4:
            raise FormatError(f"spectrum CSV row has {len(parts)} fields: {ln!r}")
        try:
            lam.append(float(parts[0]))
            R.append(float(parts[1]))
            T.append(float(parts[2]))
            A.append(float(parts[3]))
        except ValueError as e:
            raise FormatError(f"bad number in spectrum CSV: {e}") from e
    return np.array(lam), SpectrumTriplet(np.array(R), np.array(T), np.array(A))


def write_monitor_dump(spec: SpectrumTriplet) -> bytes:
    """Raw binary triplet: magic EMON1, u32 n_points, R, T, A as float64 LE."""
    n = spec.R.shape[0]
    payload = MONITOR_MAGIC + struct.pack("<I", n)
    payload += spec.R.astype("<f8").tobytes()
    payload += spec.T.astype("<f8").tobytes()
    payload += spec.A.astype("<f8").tobytes()
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def read_monitor_dump(data: bytes) -> SpectrumTriplet:
    if len(data) < 13 or data[:5] != MONITOR_MAGIC:
        raise FormatError("not a monitor dump (bad magic)")
    body, crc_bytes = data[:-4], data[-4:]
    if struct.unpack("<I", crc_bytes)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise FormatError("monitor dump CRC mismatch")
    n = struct.unpack("<I", data[5:9])[0]
    need = 9 + 3 * 8 * n + 4
    if len(data) != need:
        raise FormatError(f"monitor dump length {len(data)} != expected {need}")
    arrays = np.frombuffer(body[9:], dtype="<f8").reshape(3, n)
    return SpectrumTriplet(arrays[0].copy(), arrays[1].copy(), arrays[2].copy())
