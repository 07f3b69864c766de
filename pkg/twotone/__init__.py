"""twotone - linear theory of single-tone and balanced two-tone optomechanics."""
from twotone.core import Runner
from twotone.model import DriveConfig, DriveMode, SystemParams, build_dynamical_matrix
from twotone.spectra import NoiseModel, output_spectrum
from twotone.stability import analyze, stability_map, threshold_contour

__version__ = "1.0.0"
__all__ = [
    "Runner",
    "SystemParams",
    "DriveConfig",
    "DriveMode",
    "NoiseModel",
    "build_dynamical_matrix",
    "analyze",
    "stability_map",
    "threshold_contour",
    "output_spectrum",
]
