"""Pseudo-spectral solvers and estimate monitors for periodic incompressible flow.

Modules: ``spectral`` (grids, transforms, Leray projection, Stokes stepping),
``hns2d`` (2.5D background flow), ``ins3d`` (variable-density perturbation
system), ``lagrangian`` (flow maps and patches), ``twisted_div`` (twisted
divergence fixed point), ``estimates`` (norms, monitors, fits) and
``harness`` (configs, runs, manifests).
"""

from .errors import (CertifiedRegionError, ConfigurationError, DegenerateInputError, DivergenceError,
                     InconsistentDataError, NonContractionError, NsslError, NumericalError, StabilityError,
                     TopologyError, WindowError)
from .spectral import Grid, SpectralField, leray_project, stokes_step

__version__ = "0.1.0"

__all__ = [
    "CertifiedRegionError", "ConfigurationError", "DegenerateInputError", "DivergenceError", "Grid",
    "InconsistentDataError", "NonContractionError", "NsslError", "NumericalError", "SpectralField",
    "StabilityError", "TopologyError", "WindowError", "leray_project", "stokes_step", "__version__",
]
