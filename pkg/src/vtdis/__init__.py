"""Variance-tuned diffusion importance sampling.

A variance-exploding diffusion sampler whose per-step proposal
covariances are tuned after training to maximize the effective sample
size of trajectory-wise importance weights, plus a probability-flow ODE
likelihood baseline for comparison.
"""

from .gaussians import Covariance, log_density, logsumexp, sample
from .schedule import TimeGrid, geometric_grid, karras_grid

__version__ = "0.1.0"

__all__ = [
    "Covariance",
    "TimeGrid",
    "geometric_grid",
    "karras_grid",
    "log_density",
    "logsumexp",
    "sample",
    "__version__",
]
