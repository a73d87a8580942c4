"""Drude metal model.

Time convention exp(-i*omega*t), so a passive metal has Im(eps) >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..constants import SILVER_EPS_INF, SILVER_GAMMA, SILVER_OMEGA_P
from ..errors import ConfigError


@dataclass(frozen=True)
class DrudeMedium:
    eps_inf: float
    omega_p: float   # rad/s
    gamma: float     # 1/s

    def validate(self) -> None:
        if self.eps_inf < 1.0:
            raise ConfigError(f"eps_inf must be >= 1, got {self.eps_inf}")
        if not self.omega_p > 0.0:
            raise ConfigError(f"omega_p must be positive, got {self.omega_p}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")


def silver() -> DrudeMedium:
    """The near-infrared silver fit used throughout the package."""
    return DrudeMedium(SILVER_EPS_INF, SILVER_OMEGA_P, SILVER_GAMMA)


def drude_permittivity(m: DrudeMedium, omega):
    """eps(omega) = eps_inf - omega_p^2 / (omega^2 + i*gamma*omega).

    omega in rad/s, scalar or array, strictly positive.
    """
    m.validate()
    w = np.asarray(omega, dtype=np.float64)
    if np.any(w <= 0.0):
        raise ConfigError("omega must be positive")
    eps = m.eps_inf - m.omega_p**2 / (w * w + 1j * m.gamma * w)
    if np.isscalar(omega):
        return complex(eps)
    return eps
