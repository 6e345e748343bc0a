"""Stability workbench for 2D periodic traveling waves of parabolic systems.

Subpackages cover: spectral calculus on periodic grids (fields), the
discrete Floquet-Bloch transform (bloch), polynomial reaction/flux models
and modulated operators (system, model), traveling-wave profile solving
(profiles), Bloch-symbol spectra and the desingularized critical block
(spectra), the decomposed linear solution operator (propagator), nonlinear
time integration in direct and modulated coordinates (evolve), and batch
runs with reports (runs, cli).
"""

from . import bloch, fields, model, profiles, propagator, spectra, system

__all__ = ["fields", "bloch", "system", "model", "profiles", "spectra", "propagator"]

__version__ = "0.1.0"
