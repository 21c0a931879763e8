"""Differentiable nighttime heat-transfer model for parabolic-trough loops
and the inverse calibration recovering mass-flow ratios and receiver
heat-loss coefficients from loop temperature sensors."""

__version__ = "0.1.0"

from .errors import TroughcalError

__all__ = ["TroughcalError", "__version__"]
