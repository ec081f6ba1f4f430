"""polar-denoise: reverse-diffusion denoising over empirical atom priors.

Corrupt signals with isotropic noise realized as Brownian motion stopped at an
exponential time; recover them by simulating the time-reversed diffusion whose
drift is available in closed form from the sample, with exact categorical
posteriors and high-dimensional concentration certificates alongside.
"""

from ._backend import active_backend
from .kernel import KernelParams
from .prior import EmpiricalPrior, ImageGrid, generate_synthetic
from .dynamics import (
    DriftField,
    ModelConfig,
    StopReason,
    Trajectory,
    default_stop_threshold,
    exact_drift,
    forward_corrupt,
    leading_order_drift,
    perturb_drift,
    reverse_sample,
    reverse_sample_batch,
)
from .posterior import posterior_weights, posterior_sample

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "active_backend",
    "KernelParams",
    "EmpiricalPrior",
    "ImageGrid",
    "generate_synthetic",
    "DriftField",
    "ModelConfig",
    "StopReason",
    "Trajectory",
    "default_stop_threshold",
    "exact_drift",
    "forward_corrupt",
    "leading_order_drift",
    "perturb_drift",
    "reverse_sample",
    "reverse_sample_batch",
    "posterior_weights",
    "posterior_sample",
]
