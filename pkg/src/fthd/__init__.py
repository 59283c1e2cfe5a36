"""Physics-informed estimation of single-track vehicle coefficients.

A neural estimator predicts Pacejka, drivetrain and inertia coefficients that
drive an explicit-Euler bicycle model.  It is pretrained on next-step velocity
fit, fine-tuned with frozen leading layers and a time-derivative consistency
term, and can embed an extended Kalman filter to split noisy measurements
into physical and noise components.
"""

from .dynamics import (COEFF_NAMES, Bounds, ControlInput, EstimatedCoefficients,
                       KnownCoefficients, VehicleState)
from .net import NetworkConfig

__version__ = "0.1.0"

__all__ = ["COEFF_NAMES", "Bounds", "ControlInput", "EstimatedCoefficients",
           "KnownCoefficients", "NetworkConfig", "VehicleState"]
