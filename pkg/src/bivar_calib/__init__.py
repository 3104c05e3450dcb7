"""Joint calibration of wind speed and temperature ensemble forecasts with
bivariate truncated-normal BMA, plus a Gaussian-copula baseline and
multivariate verification."""

from .bma import BmaModel, GroupSpec, make_group_model
from .dists import Moments2, TruncBivNormal
from .em import EmConfig, fit

__all__ = [
    "BmaModel",
    "EmConfig",
    "GroupSpec",
    "Moments2",
    "TruncBivNormal",
    "fit",
    "make_group_model",
]

__version__ = "0.1.0"
