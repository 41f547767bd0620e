"""2D Gaussian splat image fitting with flat-histogram exploration and
quasi-Newton-guided exploitation."""

__version__ = "0.1.0"

from .model import Gaussian2D, GaussianCloud, build_covariance, covariance_eigen_sqrt

__all__ = [
    "Gaussian2D",
    "GaussianCloud",
    "build_covariance",
    "covariance_eigen_sqrt",
    "__version__",
]
