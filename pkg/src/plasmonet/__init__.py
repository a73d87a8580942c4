"""Plasmonic metasurface toolkit.

Generates random silver unit-cell patterns, computes their absorption
spectra with an in-package FDTD solver (checked against a transfer-matrix
reference), and trains a convolutional-recurrent surrogate that predicts
the spectrum directly from the binary pattern.
"""

__version__ = "0.1.0"
