"""Transfer-matrix reference for laterally uniform stacks, normal incidence.

Characteristic-matrix formalism: each finite layer contributes
    M = [[cos d,  -i sin d / n], [-i n sin d,  cos d]],  d = k0 n thickness
(the sign of i follows the exp(-i w t) time convention used throughout),
and [B, C]^T = (prod M_j) [1, n_out]^T gives
    r = (n_in B - C)/(n_in B + C),  t = 2 n_in/(n_in B + C),
    R = |r|^2,  T = Re(n_out)/Re(n_in) |t|^2.
Complex indices take the branch Im(n) >= 0 (absorbing, exp(-i w t)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..constants import C0
from ..errors import ConfigError
from .drude import DrudeMedium, drude_permittivity
from .spectral import SpectralGrid, SpectrumTriplet


@dataclass(frozen=True)
class Layer:
    """One slab: semi-infinite when thickness_nm is None.

    Exactly one of `index` (constant, possibly complex) or `medium`
    (dispersive) must be given.
    """

    thickness_nm: Optional[float] = None
    index: Optional[complex] = None
    medium: Optional[DrudeMedium] = None

    def validate(self) -> None:
        if (self.index is None) == (self.medium is None):
            raise ConfigError("layer needs exactly one of index or medium")
        if self.thickness_nm is not None and self.thickness_nm < 0.0:
            raise ConfigError(f"layer thickness must be >= 0, got {self.thickness_nm}")

    def refractive_index(self, omega: np.ndarray) -> np.ndarray:
        if self.index is not None:
            return np.full(omega.shape, complex(self.index), dtype=np.complex128)
        eps = drude_permittivity(self.medium, omega)
        n = np.sqrt(np.asarray(eps, dtype=np.complex128))
        # passive branch
        return np.where(n.imag < 0.0, -n, n)


@dataclass(frozen=True)
class LayerStack:
    layers: tuple

    def validate(self) -> None:
        if len(self.layers) < 2:
            raise ConfigError("stack needs at least incidence and exit media")
        for ly in self.layers:
            ly.validate()
        if self.layers[0].thickness_nm is not None or self.layers[-1].thickness_nm is not None:
            raise ConfigError("first and last layers must be semi-infinite (thickness None)")
        for ly in self.layers[1:-1]:
            if ly.thickness_nm is None:
                raise ConfigError("interior layers need a finite thickness")


def film_stack(medium: DrudeMedium, thickness_nm: float, n_in: float = 1.0,
               n_out: float = 1.5) -> LayerStack:
    """Incidence side | metal film | substrate, the study's uniform stack."""
    return LayerStack((
        Layer(index=n_in),
        Layer(thickness_nm=thickness_nm, medium=medium),
        Layer(index=n_out),
    ))


def tmm_spectrum(stack: LayerStack, grid: SpectralGrid) -> SpectrumTriplet:
    stack.validate()
    grid.validate()
    omega = 2.0 * np.pi * grid.frequencies()
    k0 = omega / C0

    n_in = stack.layers[0].refractive_index(omega)
    n_out = stack.layers[-1].refractive_index(omega)
    B = np.ones_like(n_out)
    C = n_out.copy()
    # accumulate M_1 (M_2 (... (M_m v))) by walking interior layers backward
    for ly in reversed(stack.layers[1:-1]):
        n = ly.refractive_index(omega)
        d = k0 * n * (ly.thickness_nm * 1e-9)
        cd = np.cos(d)
        sd = np.sin(d)
        B, C = cd * B - 1j * sd / n * C, -1j * n * sd * B + cd * C

    denom = n_in * B + C
    r = (n_in * B - C) / denom
    t = 2.0 * n_in / denom
    R = np.abs(r) ** 2
    T = (n_out.real / n_in.real) * np.abs(t) ** 2
    return SpectrumTriplet(R, T)
