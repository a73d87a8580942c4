"""Electromagnetic solvers: spectral grid, Drude media, transfer-matrix
reference, and the 3D FDTD oracle."""

from .drude import DrudeMedium, drude_permittivity, silver
from .spectral import (
    SpectralGrid,
    SpectrumTriplet,
    read_monitor_dump,
    read_spectrum_csv,
    spectrum_csv,
    write_monitor_dump,
)
from .tmm import Layer, LayerStack, tmm_spectrum
from .fdtd import SimConfig, build_sim_domain, run_fdtd

__all__ = [
    "DrudeMedium",
    "drude_permittivity",
    "silver",
    "SpectralGrid",
    "SpectrumTriplet",
    "spectrum_csv",
    "read_spectrum_csv",
    "write_monitor_dump",
    "read_monitor_dump",
    "Layer",
    "LayerStack",
    "tmm_spectrum",
    "SimConfig",
    "build_sim_domain",
    "run_fdtd",
]
