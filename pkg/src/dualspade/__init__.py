"""Dual mode-sorter superresolution of two incoherent point sources.

Simulation, calibration-curve fitting, joint maximum-likelihood estimation
of separation/centroid/brightness imbalance, and Fisher-information /
Cramer-Rao analysis of the measurement design.
"""
from ._backend import HAVE_COMPILED
from .core import (
    DEFAULT_ACTIVE_MODES,
    DemuxLayout,
    DualSpadeError,
    ModeId,
    ObservationSeries,
    PhotonBudget,
    Scene,
    validate_scene,
)
from .forward import ForwardModel
from .optics import IdealResponse, hg_intensity_fraction, source_response

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_ACTIVE_MODES",
    "DemuxLayout",
    "DualSpadeError",
    "ForwardModel",
    "HAVE_COMPILED",
    "IdealResponse",
    "ModeId",
    "ObservationSeries",
    "PhotonBudget",
    "Scene",
    "hg_intensity_fraction",
    "source_response",
    "validate_scene",
    "__version__",
]
